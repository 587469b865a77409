"""Local orchestration: multi-role round trips, benchmarks and a training demo.

:class:`Deployment` wires a server, the assisting-node pool and the users
together over an :class:`~eseafl.transport.InProcessNetwork`, where the
scheduler draining every queue stands in for the round deadline.
:func:`run_round_trip` can instead start every role on its own thread, talking
TCP through a :class:`~eseafl.transport.TcpHub` on localhost.
"""

from __future__ import annotations

import logging
import random
import statistics
import threading
from dataclasses import dataclass, field, replace

import numpy as np
from prettytable import PrettyTable, TableStyle

from .errors import ConfigurationError, RoundError
from .masking import dequantize, quantize, ring_sum, to_ring
from .messages import PartyId, Role
from .protocol import (
    Mode,
    ProtocolConfig,
    party_keygen,
    round_beacon,
    select_assisting_nodes,
)
from .roles import AGGREGATION, SETUP, NodeActor, ServerActor, UserActor, serve
from .transport import InProcessNetwork, TcpHub, TcpLink

TYPE_CHECKING = False
if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence
    from typing import Literal

    import numpy.typing as npt

    from .masking import GradientVector
    from .messages import KeyAnnounce, RoundResult
    from .protocol import PartyKeys
    from .roles import Actor
    from .transport import LinkPolicy

    TransportName = Literal["inprocess", "tcp"]

logger = logging.getLogger(__name__)

CSV_FIELDS = [
    "phase",
    "role",
    "n",
    "k",
    "d",
    "mode",
    "rep",
    "wall_time_ms",
    "outbound_bytes",
]


##############################
# DEPLOYMENTS                #
##############################


def generate_keys(
    cfg: ProtocolConfig, rng: random.Random
) -> dict[PartyId, PartyKeys]:
    """Key pairs for the server, every pool node and every user."""
    parties = [PartyId.server()]
    parties += [PartyId.node(j) for j in range(cfg.pool)]
    parties += [PartyId.user(i) for i in range(cfg.n)]
    return {party: party_keygen(cfg, party, rng)[0] for party in parties}


class Deployment:
    """Every role of one deployment on a single in-process network.

    ``seed`` fixes keys, per-party randomness and delivery order;
    ``schedule_seed``, when given, reseeds only the delivery order.
    """

    def __init__(
        self,
        cfg: ProtocolConfig,
        *,
        seed: int = 0,
        schedule_seed: int | None = None,
        star: bool = False,
        tamper: bool = False,
        quantized: bool = False,
        drop: LinkPolicy | None = None,
        delay: LinkPolicy | None = None,
        keys: Mapping[PartyId, PartyKeys] | None = None,
        roster: Mapping[PartyId, KeyAnnounce] | None = None,
    ) -> None:
        star = star or cfg.reconcile
        if star and cfg.recovery:
            msg = "Node recovery needs direct node-to-node links, not a star relay"
            raise ConfigurationError(msg)
        self.cfg = cfg
        keys = keys or generate_keys(cfg, random.Random(seed))
        self.network = InProcessNetwork(
            seed if schedule_seed is None else schedule_seed, drop=drop, delay=delay
        )
        self.server = ServerActor(
            cfg,
            keys[PartyId.server()],
            _party_rng(seed, PartyId.server()),
            tamper=tamper,
            star=star,
            roster=roster,
        )
        self.nodes = [
            NodeActor(
                cfg,
                keys[PartyId.node(j)],
                _party_rng(seed, PartyId.node(j)),
                star=star,
                roster=roster,
            )
            for j in range(cfg.pool)
        ]
        self.users = [
            UserActor(
                cfg,
                keys[PartyId.user(i)],
                _party_rng(seed, PartyId.user(i)),
                quantized=quantized,
                star=star,
                roster=roster,
            )
            for i in range(cfg.n)
        ]
        for actor in self.actors:
            actor.attach(self.network.register(actor.party, actor.on_frame))

    @property
    def actors(self) -> list[Actor]:
        return [self.server, *self.nodes, *self.users]

    def setup(self) -> None:
        for actor in self.actors:
            actor.announce()
        self.network.run()
        not_ready = [user.party for user in self.users if not user.ready]
        if not_ready:
            msg = f"Setup did not complete for {', '.join(map(str, not_ready))}"
            raise ConfigurationError(msg)

    def select_nodes(self, t: int) -> tuple[int, ...]:
        return select_assisting_nodes(
            self.cfg.pool, self.cfg.k, round_beacon(t), self.server.state.recovered
        )

    def run_round(
        self,
        t: int,
        inputs: Mapping[int, npt.ArrayLike],
        *,
        drop_nodes: Iterable[int] = (),
    ) -> RoundResult:
        """Run iteration ``t`` with the users in ``inputs`` online.

        Nodes in ``drop_nodes`` go offline before the round starts. Raises the
        server's :class:`RoundError` when the round aborts.
        """
        for j in drop_nodes:
            self.nodes[j].offline = True
        nodes = self.select_nodes(t)
        self.server.begin_round(t, nodes)
        for i, w in inputs.items():
            self.users[i].start_round(t, w, nodes)
        self.network.run()
        for j in nodes:
            self.nodes[j].close_round(t)
        self.network.run()
        # first expiry may start a recovery, the second gives up
        for _ in range(2):
            if t in self.server.results:
                break
            self.server.close_round(t)
            self.network.run()
        error = self.server.errors.get(t)
        if error is not None:
            raise error
        return self.server.results[t]


@dataclass
class RoundTripReport:
    results: list[RoundResult]
    expected: GradientVector
    online: list[int]
    accepted: dict[int, list[bool]] = field(default_factory=dict)
    rejections: int = 0

    @property
    def result(self) -> RoundResult:
        return self.results[-1]

    @property
    def matches(self) -> bool:
        return all(np.array_equal(r.w_t, self.expected) for r in self.results)


def _ring_inputs(
    cfg: ProtocolConfig, inputs: Sequence[npt.ArrayLike], quantized: bool
) -> list[GradientVector]:
    if len(inputs) != cfg.n:
        msg = f"Expected {cfg.n} input vectors, got {len(inputs)}"
        raise ConfigurationError(msg)
    if quantized:
        return [to_ring(np.asarray(w).tolist()) for w in inputs]
    return [quantize(w, cfg.quant) for w in inputs]


def run_round_trip(
    cfg: ProtocolConfig,
    inputs: Sequence[npt.ArrayLike],
    *,
    seed: int = 0,
    offline: Iterable[int] = (),
    drop_nodes: Iterable[int] = (),
    rounds: int = 1,
    tamper: bool = False,
    quantized: bool = False,
    transport: TransportName = "inprocess",
    drop: LinkPolicy | None = None,
    timeout: float = 60.0,
) -> RoundTripReport:
    """Run ``rounds`` iterations end to end and compare with the plaintext sum.

    Users in ``offline`` never send their round messages. The expected value
    is the modular sum of the online users' quantized inputs.
    """
    offline = set(offline)
    drop_nodes = list(drop_nodes)
    online = [i for i in range(cfg.n) if i not in offline]
    ring = _ring_inputs(cfg, inputs, quantized)
    if online:
        expected = ring_sum([ring[i] for i in online])
    else:
        expected = np.zeros(cfg.d, dtype=np.uint32)

    if transport == "tcp":
        if drop_nodes or drop is not None:
            msg = "Dropping nodes or frames is only supported in-process"
            raise ConfigurationError(msg)
        server, users = _run_tcp(
            cfg, inputs, online, rounds, seed, tamper, quantized, timeout
        )
        actors: list[Actor] = [server, *users]
        results = [server.results[t] for t in sorted(server.results)]
        error = next(iter(server.errors.values()), None)
    else:
        deployment = Deployment(
            cfg, seed=seed, tamper=tamper, quantized=quantized, drop=drop
        )
        deployment.setup()
        users, actors = deployment.users, deployment.actors
        results = []
        error = None
        for t in range(1, rounds + 1):
            round_inputs = {i: inputs[i] for i in online}
            results.append(
                deployment.run_round(t, round_inputs, drop_nodes=drop_nodes)
            )
    if error is not None:
        raise error

    report = RoundTripReport(results=results, expected=expected, online=online)
    for i in online:
        report.accepted[i] = [
            users[i].accepted.get(t, False) for t in range(1, rounds + 1)
        ]
    report.rejections = sum(len(actor.rejections) for actor in actors)
    return report


def _party_rng(seed: int, party: PartyId) -> random.Random:
    return random.Random(f"{seed}:{party}")


def _run_tcp(
    cfg: ProtocolConfig,
    inputs: Sequence[npt.ArrayLike],
    online: Iterable[int],
    rounds: int,
    seed: int,
    tamper: bool,
    quantized: bool,
    timeout: float,
    host: str = "127.0.0.1",
) -> tuple[ServerActor, list[UserActor]]:
    """Every role on its own thread, connected through a localhost hub."""
    if cfg.recovery:
        msg = "Node recovery needs direct node-to-node links, not a star relay"
        raise ConfigurationError(msg)
    online = set(online)
    cfg = replace(cfg, T=rounds)
    keys = generate_keys(cfg, random.Random(seed))
    hub = TcpHub(host, 0, cfg.max_frame_size)
    hub.start()

    server = ServerActor(
        cfg,
        keys[PartyId.server()],
        _party_rng(seed, PartyId.server()),
        tamper=tamper,
        star=True,
    )
    server.attach(hub.endpoint(server.party))
    server.announce()

    clients: list[NodeActor | UserActor] = [
        NodeActor(
            cfg,
            keys[PartyId.node(j)],
            _party_rng(seed, PartyId.node(j)),
            auto_close=True,
            star=True,
        )
        for j in range(cfg.pool)
    ]
    users = [
        UserActor(
            cfg,
            keys[PartyId.user(i)],
            _party_rng(seed, PartyId.user(i)),
            inputs=(lambda _t, w=inputs[i]: w),
            rounds=rounds if i in online else 0,
            quantized=quantized,
            star=True,
        )
        for i in range(cfg.n)
    ]
    clients.extend(users)

    server_thread = threading.Thread(
        target=serve, args=(server, hub.inbox), kwargs={"timeout": timeout}
    )
    links: list[TcpLink] = []
    waiting: list[threading.Thread] = []
    for actor in clients:
        link = TcpLink(host, hub.address[1], cfg.max_frame_size)
        links.append(link)
        actor.attach(link.endpoint(actor.party))
        actor.announce()
        thread = threading.Thread(
            target=serve,
            args=(actor, link.inbox),
            kwargs={"timeout": timeout},
            daemon=True,
        )
        thread.start()
        if isinstance(actor, UserActor) and actor.party.index in online:
            waiting.append(thread)
    server_thread.start()
    server_thread.join(timeout)
    # online users stop once the last result reached them
    for thread in waiting:
        thread.join(timeout)
    hub.close()
    for link in links:
        link.close()
    return server, users


##############################
# BENCHMARKS                 #
##############################


@dataclass(frozen=True)
class BenchSpec:
    n_values: tuple[int, ...] = (50, 100, 200, 400)
    k: int = 3
    d: int = 1_000
    mode: Mode = Mode.SEMI_HONEST
    integrity: bool = False
    repetitions: int = 10
    transport: TransportName = "inprocess"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            msg = f"Repetitions must be >= 1: {self.repetitions}"
            raise ConfigurationError(msg)
        if not self.n_values:
            msg = "At least one value of n is required"
            raise ConfigurationError(msg)

    def config(self, n: int) -> ProtocolConfig:
        return ProtocolConfig(
            n=n, k=self.k, d=self.d, mode=self.mode, integrity=self.integrity
        )


@dataclass(frozen=True)
class BenchRecord:
    phase: str
    role: str
    n: int
    k: int
    d: int
    mode: str
    rep: int
    wall_time_ms: float
    outbound_bytes: int

    def row(self) -> list[object]:
        return [getattr(self, name) for name in CSV_FIELDS]


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


@dataclass
class BenchReport:
    records: list[BenchRecord]

    def table(self) -> PrettyTable:
        table = PrettyTable(CSV_FIELDS)
        table.float_format["wall_time_ms"] = ".3"
        table.add_rows([record.row() for record in self.records])
        return table

    @property
    def csv(self) -> str:
        return self.table().get_csv_string(lineterminator="\n")

    def means(self) -> dict[tuple[str, str, int], float]:
        groups: dict[tuple[str, str, int], list[float]] = {}
        for r in self.records:
            groups.setdefault((r.phase, r.role, r.n), []).append(r.wall_time_ms)
        return {key: statistics.fmean(times) for key, times in groups.items()}

    def summary(self) -> str:
        table = PrettyTable(["phase", "role", "n", "mean_ms", "outbound_bytes"])
        table.set_style(TableStyle.SINGLE_BORDER)
        table.align = "r"
        table.align["phase"] = table.align["role"] = "l"
        table.float_format["mean_ms"] = ".3"
        sizes = {(r.phase, r.role, r.n): r.outbound_bytes for r in self.records}
        for (phase, role, n), mean in sorted(self.means().items()):
            table.add_row([phase, role, n, mean, sizes[(phase, role, n)]])
        return table.get_string()

    def fit(self, role: str, phase: str = AGGREGATION) -> LinearFit:
        """Least-squares line of mean time against n for one role."""
        points = sorted(
            (n, mean)
            for (p, r, n), mean in self.means().items()
            if (p, r) == (phase, role)
        )
        if len(points) < 2:
            msg = f"Need at least two values of n to fit {role} timings"
            raise ConfigurationError(msg)
        xs = np.array([n for n, _ in points], dtype=np.float64)
        ys = np.array([mean for _, mean in points], dtype=np.float64)
        slope, intercept = np.polyfit(xs, ys, 1)
        residual = float(np.sum((ys - (slope * xs + intercept)) ** 2))
        total = float(np.sum((ys - ys.mean()) ** 2))
        r_squared = 1.0 - residual / total if total else 1.0
        return LinearFit(float(slope), float(intercept), r_squared)


def expected_outbound_bytes(cfg: ProtocolConfig, role: Role) -> int:
    """Aggregation-phase body bytes one party of ``role`` sends in a full round."""
    wire = cfg.wire
    if role is Role.USER:
        return wire.masked_update_size() + cfg.k * wire.participation_size()
    if role is Role.NODE:
        return wire.node_aggregate_size()
    return cfg.n * wire.round_result_size()


def _role_records(
    actors: Sequence[Actor], spec: BenchSpec, n: int, rep: int
) -> list[BenchRecord]:
    records = []
    for phase in (SETUP, AGGREGATION):
        for role in (Role.USER, Role.NODE, Role.SERVER):
            group = [a for a in actors if a.party.role is role]
            if not group:
                continue
            time_ms = statistics.fmean(a.compute_ns[phase] for a in group) / 1e6
            sent = round(statistics.fmean(a.outbound[phase] for a in group))
            records.append(
                BenchRecord(
                    phase=phase,
                    role=role.name.lower(),
                    n=n,
                    k=spec.k,
                    d=spec.d,
                    mode=spec.mode.value,
                    rep=rep,
                    wall_time_ms=time_ms,
                    outbound_bytes=sent,
                )
            )
    return records


def run_bench(spec: BenchSpec) -> BenchReport:
    """Time every role for each n; one record per (phase, role, n, repetition)."""
    records: list[BenchRecord] = []
    for n in spec.n_values:
        cfg = spec.config(n)
        for rep in range(spec.repetitions):
            seed = spec.seed + rep
            data = np.random.default_rng(seed)
            inputs = [data.uniform(-1, 1, spec.d) for _ in range(n)]
            if spec.transport == "tcp":
                server, users = _run_tcp(
                    cfg, inputs, range(n), 1, seed, False, False, timeout=300.0
                )
                actors: list[Actor] = [server, *users]
            else:
                deployment = Deployment(cfg, seed=seed)
                deployment.setup()
                deployment.run_round(1, dict(enumerate(inputs)))
                actors = deployment.actors
            records.extend(_role_records(actors, spec, n, rep))
            logger.info("bench n=%d rep=%d done", n, rep)
    return BenchReport(records)


##############################
# TRAINING DEMO              #
##############################


@dataclass(frozen=True)
class DemoRound:
    t: int
    loss: float
    gap: float
    exact_match: bool
    rejected_by: int


@dataclass
class DemoReport:
    rounds: list[DemoRound]
    theta: npt.NDArray[np.float64]
    theta_star: npt.NDArray[np.float64]

    def table(self) -> str:
        table = PrettyTable(["round", "loss", "secure-plain gap", "exact", "rejected"])
        table.set_style(TableStyle.SINGLE_BORDER)
        table.custom_format["loss"] = lambda _f, v: f"{v:.6f}"
        table.custom_format["secure-plain gap"] = lambda _f, v: f"{v:.2e}"
        for r in self.rounds:
            exact = "yes" if r.exact_match else "NO"
            table.add_row([r.t, r.loss, r.gap, exact, r.rejected_by])
        return table.get_string()

    def max_gap(self) -> float:
        return max((r.gap for r in self.rounds), default=0.0)

    def loss_decreasing(self, first: int = 10) -> bool:
        losses = [r.loss for r in self.rounds[:first]]
        return all(b < a for a, b in zip(losses, losses[1:]))


def _loss(
    xs: Sequence[npt.NDArray[np.float64]],
    ys: Sequence[npt.NDArray[np.float64]],
    theta: npt.NDArray[np.float64],
) -> float:
    return statistics.fmean(
        float(np.mean((x @ theta - y) ** 2)) for x, y in zip(xs, ys)
    )


def run_demo(
    n: int = 8,
    k: int = 2,
    d: int = 8,
    rounds: int = 20,
    *,
    seed: int = 0,
    samples: int = 32,
    lr: float = 0.1,
    integrity: bool = False,
    tamper: bool = False,
    exact: bool = False,
    mode: Mode = Mode.SEMI_HONEST,
) -> DemoReport:
    """Federated averaging of linear-regression gradients through secure rounds.

    With ``exact`` the users quantize locally and mask ring vectors directly.
    A tampered round is rejected by every user and leaves the model unchanged.
    """
    integrity = integrity or tamper
    cfg = ProtocolConfig(n=n, k=k, d=d, T=rounds, mode=mode, integrity=integrity)
    data = np.random.default_rng(seed)
    theta_star = data.uniform(-1, 1, d)
    xs = [data.standard_normal((samples, d)) for _ in range(n)]
    ys = [x @ theta_star + 0.1 * data.standard_normal(samples) for x in xs]

    deployment = Deployment(cfg, seed=seed, tamper=tamper, quantized=exact)
    deployment.setup()
    theta = np.zeros(d)
    history = []
    for t in range(1, rounds + 1):
        grads = [2.0 / samples * x.T @ (x @ theta - y) for x, y in zip(xs, ys)]
        ring = [quantize(g, cfg.quant) for g in grads]
        inputs = {i: (ring[i] if exact else grads[i]) for i in range(n)}
        result = deployment.run_round(t, inputs)
        secure = dequantize(result.w_t, result.contributor_count, cfg.quant)
        plain = np.mean(grads, axis=0)
        rejected_by = sum(1 for user in deployment.users if not user.accepted.get(t))
        if not rejected_by:
            theta = theta - lr * secure
        history.append(
            DemoRound(
                t=t,
                loss=_loss(xs, ys, theta),
                gap=float(np.max(np.abs(secure - plain))),
                exact_match=bool(np.array_equal(result.w_t, ring_sum(ring))),
                rejected_by=rejected_by,
            )
        )
        logger.info("demo round %d loss %.6f", t, history[-1].loss)
    return DemoReport(rounds=history, theta=theta, theta_star=theta_star)
