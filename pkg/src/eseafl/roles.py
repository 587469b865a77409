"""Role actors: drive the protocol state machines from transport frames.

An actor owns exactly one role state and is fed frames one at a time, either
by :class:`~eseafl.transport.InProcessNetwork` or by :func:`serve` reading a
TCP inbox. Actors never raise on bad input from peers; rejected messages are
logged and kept in :attr:`Actor.rejections`.

In star topology every frame a user or node sends goes to the server, which
relays it unchanged (sender field included) to its destination.
"""

from __future__ import annotations

import logging
import queue
import time
from collections import Counter
from contextlib import contextmanager

from .errors import (
    AuthFailure,
    BelowThreshold,
    InvalidPoint,
    LengthMismatch,
    ListMismatch,
    MalformedFrame,
    RejectedMessage,
    RoundError,
)
from .masking import to_ring
from .messages import (
    AggregatedMaskMsg,
    KeyAnnounce,
    MaskedUpdate,
    MessageType,
    ParticipationMsg,
    PartyId,
    ReconcileRequest,
    RecoveryShare,
    Role,
    RoundResult,
    SecretCiphertext,
)
from .protocol import (
    RHO_DEALER,
    check_roster,
    node_emit_aggregate,
    node_handle_participation,
    node_handle_reconcile,
    node_reveal_share,
    node_setup,
    node_share_master,
    node_store_share,
    round_beacon,
    select_assisting_nodes,
    server_abort_round,
    server_finalize_round,
    server_ingest_update,
    server_reconcile_request,
    server_record_participation,
    server_recover_node,
    server_register,
    server_setup,
    server_sign_result,
    server_store_recovery_share,
    user_accept_result,
    user_install_secret,
    user_mask_update,
    user_ready,
    user_round,
    user_setup,
)
from .transport import decode_message, encode_message

TYPE_CHECKING = False
if TYPE_CHECKING:
    from collections.abc import Callable, Iterator, Mapping, Sequence
    from typing import ClassVar

    import numpy.typing as npt

    from .crypto import EntropySource
    from .masking import MaskVector
    from .messages import Message
    from .protocol import NodeState, PartyKeys, ProtocolConfig, ServerState, UserState
    from .transport import Endpoint, Frame

    InputSource = Callable[[int], npt.ArrayLike]

logger = logging.getLogger(__name__)

SETUP = "setup"
AGGREGATION = "aggregation"

_SETUP_TYPES = frozenset({MessageType.KEY_ANNOUNCE, MessageType.RHO_CIPHERTEXT})

# errors a peer can provoke with a bad frame
_REJECTIONS = (
    RejectedMessage,
    MalformedFrame,
    LengthMismatch,
    AuthFailure,
    InvalidPoint,
)


class Actor:
    role: ClassVar[Role]

    def __init__(
        self,
        cfg: ProtocolConfig,
        keys: PartyKeys,
        rng: EntropySource,
        *,
        star: bool = False,
        roster: Mapping[PartyId, KeyAnnounce] | None = None,
    ) -> None:
        self.cfg = cfg
        self.keys = keys
        self.party = keys.party
        self.rng = rng
        self.star = star or cfg.reconcile
        self.roster = roster
        self.endpoint: Endpoint | None = None
        self.compute_ns: Counter[str] = Counter()
        self.rejections: list[tuple[PartyId, str]] = []
        self.offline = False
        self._wire = cfg.wire

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.party}>"

    def attach(self, endpoint: Endpoint) -> None:
        self.endpoint = endpoint

    @property
    def outbound(self) -> Counter[str]:
        if self.endpoint is None:
            return Counter()
        return self.endpoint.outbound

    @property
    def done(self) -> bool:
        return False

    @contextmanager
    def timed(self, phase: str) -> Iterator[None]:
        if self.endpoint is not None:
            self.endpoint.phase = phase
        start = time.perf_counter_ns()
        try:
            yield
        finally:
            self.compute_ns[phase] += time.perf_counter_ns() - start

    def send(self, dest: PartyId, message: Message) -> None:
        if self.endpoint is None:
            msg = f"{self.party} is not attached to a transport"
            raise RuntimeError(msg)
        msg_type, body = encode_message(message, self.party.role, self._wire)
        logger.debug(
            "%s -> %s: %s (%d bytes)", self.party, dest, msg_type.name, len(body)
        )
        self.endpoint.send(self._route(dest), msg_type, body)

    def _route(self, dest: PartyId) -> PartyId:
        return PartyId.server() if self.star else dest

    def on_frame(self, frame: Frame) -> None:
        if self.offline:
            return
        phase = SETUP if frame.msg_type in _SETUP_TYPES else AGGREGATION
        if frame.msg_type is MessageType.RECOVERY_SHARE and self.role is Role.NODE:
            phase = SETUP if frame.sender.role is Role.NODE else AGGREGATION
        with self.timed(phase):
            try:
                self.handle(frame, decode_message(frame, self._wire))
            except _REJECTIONS as exc:
                self.reject(frame.sender, exc)

    def reject(self, sender: PartyId, exc: Exception) -> None:
        logger.warning("%s rejected a message from %s: %s", self.party, sender, exc)
        self.rejections.append((sender, str(exc)))

    def announce(self) -> None:
        """Publish this party's public keys to the peers that need them."""

    def handle(self, frame: Frame, message: Message) -> None:
        raise NotImplementedError

    def tick(self, now: float) -> None:
        """Fire any deadline that has passed; used by networked runs."""


##############################
# USER                       #
##############################


class UserActor(Actor):
    role = Role.USER

    def __init__(
        self,
        cfg: ProtocolConfig,
        keys: PartyKeys,
        rng: EntropySource,
        *,
        inputs: InputSource | None = None,
        rounds: int = 0,
        quantized: bool = False,
        star: bool = False,
        roster: Mapping[PartyId, KeyAnnounce] | None = None,
    ) -> None:
        super().__init__(cfg, keys, rng, star=star, roster=roster)
        self.inputs = inputs
        self.rounds = rounds
        self.quantized = quantized
        self.state: UserState | None = None
        self.node_announces: dict[int, KeyAnnounce] = {}
        self.server_announce: KeyAnnounce | None = None
        self._pending: list[tuple[int, SecretCiphertext]] = []
        self.results: dict[int, RoundResult] = {}
        self.accepted: dict[int, bool] = {}

    @property
    def ready(self) -> bool:
        return self.state is not None and user_ready(self.state)

    @property
    def done(self) -> bool:
        return self.rounds > 0 and len(self.results) >= self.rounds

    def announce(self) -> None:
        with self.timed(SETUP):
            announcement = self.keys.announcement()
            if self.star:
                self.send(PartyId.server(), announcement)
                return
            for j in range(self.cfg.pool):
                self.send(PartyId.node(j), announcement)
            if self.cfg.malicious:
                self.send(PartyId.server(), announcement)

    def handle(self, frame: Frame, message: Message) -> None:
        sender = frame.sender
        if isinstance(message, KeyAnnounce):
            check_roster(self.roster, sender, message)
            if sender.role is Role.NODE:
                self.node_announces[sender.index] = message
            elif sender.role is Role.SERVER:
                self.server_announce = message
            self._maybe_setup()
        elif isinstance(message, SecretCiphertext) and sender.role is Role.NODE:
            self._pending.append((sender.index, message))
            self._install_pending()
        elif isinstance(message, RoundResult) and sender.role is Role.SERVER:
            self._on_result(message)
        else:
            msg = f"Unexpected {frame.msg_type.name} from {sender}"
            raise RejectedMessage(msg)

    def _maybe_setup(self) -> None:
        if self.state is not None or len(self.node_announces) < self.cfg.pool:
            return
        if self.cfg.malicious and self.server_announce is None:
            return
        self.state = user_setup(
            self.cfg, self.keys, self.node_announces, self.server_announce
        )
        self._install_pending()

    def _install_pending(self) -> None:
        if self.state is None:
            return
        pending, self._pending = self._pending, []
        for node, ct in pending:
            try:
                user_install_secret(self.state, node, ct)
            except _REJECTIONS as exc:
                self.reject(PartyId.node(node), exc)
        if self.rounds and self.ready and self.state.watermark == 0:
            self.start_round(1)

    def start_round(
        self,
        t: int,
        w: npt.ArrayLike | None = None,
        nodes: Sequence[int] | None = None,
    ) -> MaskedUpdate:
        """Mask this user's input for ``t`` and send the round's messages."""
        if self.state is None:
            msg = f"{self.party} has not finished setup"
            raise RuntimeError(msg)
        if w is None:
            if self.inputs is None:
                msg = f"{self.party} has no input for iteration {t}"
                raise RuntimeError(msg)
            w = self.inputs(t)
        if nodes is None:
            nodes = select_assisting_nodes(self.cfg.pool, self.cfg.k, round_beacon(t))
        with self.timed(AGGREGATION):
            if self.quantized:
                update, participations = user_mask_update(
                    self.state, t, to_ring(w), nodes  # type: ignore[arg-type]
                )
            else:
                update, participations = user_round(self.state, t, w, nodes)
            self.send(PartyId.server(), update)
            for j, participation in participations:
                self.send(PartyId.node(j), participation)
        return update

    def _on_result(self, result: RoundResult) -> None:
        assert self.state is not None
        accepted = user_accept_result(self.state, result)
        self.results[result.t] = result
        self.accepted[result.t] = accepted
        if not accepted:
            logger.warning(
                "%s rejected the result of iteration %d", self.party, result.t
            )
        if self.rounds and result.t < self.rounds and self.inputs is not None:
            self.start_round(result.t + 1)


##############################
# ASSISTING NODE             #
##############################


class NodeActor(Actor):
    role = Role.NODE

    def __init__(
        self,
        cfg: ProtocolConfig,
        keys: PartyKeys,
        rng: EntropySource,
        *,
        auto_close: bool = False,
        star: bool = False,
        roster: Mapping[PartyId, KeyAnnounce] | None = None,
    ) -> None:
        super().__init__(cfg, keys, rng, star=star, roster=roster)
        self.auto_close = auto_close
        self.state: NodeState | None = None
        self.user_announces: dict[int, KeyAnnounce] = {}
        self._early: list[tuple[PartyId, RecoveryShare]] = []
        self._opened: dict[int, float] = {}
        self.closed: set[int] = set()

    def announce(self) -> None:
        with self.timed(SETUP):
            announcement = self.keys.announcement()
            if self.star:
                self.send(PartyId.server(), announcement)
                return
            for i in range(self.cfg.n):
                self.send(PartyId.user(i), announcement)
            if self.cfg.malicious:
                self.send(PartyId.server(), announcement)

    def handle(self, frame: Frame, message: Message) -> None:
        sender = frame.sender
        if isinstance(message, KeyAnnounce) and sender.role is Role.USER:
            check_roster(self.roster, sender, message)
            self.user_announces[sender.index] = message
            self._maybe_setup()
        elif isinstance(message, KeyAnnounce) and sender.role is Role.SERVER:
            check_roster(self.roster, sender, message)
        elif isinstance(message, ParticipationMsg):
            state = self._require_setup()
            if node_handle_participation(state, sender, message):
                self._opened.setdefault(message.t, time.monotonic())
                full = len(state.lists[message.t]) == self.cfg.n
                if self.auto_close and full:
                    self.close_round(message.t)
        elif isinstance(message, ReconcileRequest) and sender.role is Role.SERVER:
            self._require_setup()
            self._emit(lambda state: node_handle_reconcile(state, message))
        elif isinstance(message, RecoveryShare):
            self._on_recovery_share(sender, message)
        else:
            msg = f"Unexpected {frame.msg_type.name} from {sender}"
            raise RejectedMessage(msg)

    def _require_setup(self) -> NodeState:
        if self.state is None:
            msg = f"{self.party} has not finished setup"
            raise RejectedMessage(msg)
        return self.state

    def _maybe_setup(self) -> None:
        if self.state is not None or len(self.user_announces) < self.cfg.n:
            return
        self.state, secrets = node_setup(
            self.cfg,
            self.keys,
            self.user_announces,
            self.rng,
            is_rho_dealer=self.party.index == RHO_DEALER,
        )
        for user, ct in secrets:
            self.send(PartyId.user(user), ct)
        if self.cfg.recovery:
            for peer, share in node_share_master(self.state, self.rng):
                self.send(PartyId.node(peer), share)
        early, self._early = self._early, []
        for sender, share in early:
            node_store_share(self.state, sender, share)

    def _on_recovery_share(self, sender: PartyId, share: RecoveryShare) -> None:
        if sender.role is Role.NODE:
            if self.state is None:
                self._early.append((sender, share))
            else:
                node_store_share(self.state, sender, share)
        elif sender.role is Role.SERVER and share.share_index == 0:
            # the server asks for our share of a dropped node
            state = self._require_setup()
            self.send(PartyId.server(), node_reveal_share(state, share.dropped_node))
        else:
            msg = f"Unexpected recovery share from {sender}"
            raise RejectedMessage(msg)

    def _emit(self, produce: Callable[[NodeState], AggregatedMaskMsg]) -> None:
        assert self.state is not None
        try:
            out = produce(self.state)
        except BelowThreshold as exc:
            logger.info("%s withholds its aggregate: %s", self.party, exc)
            return
        self.send(PartyId.server(), out)

    def close_round(self, t: int) -> None:
        """The round deadline for ``t`` has passed: emit this node's aggregate."""
        if self.offline or self.state is None or t in self.closed:
            return
        self.closed.add(t)
        with self.timed(AGGREGATION):
            self._emit(lambda state: node_emit_aggregate(state, t))

    def tick(self, now: float) -> None:
        for t, opened in list(self._opened.items()):
            if t not in self.closed and now - opened >= self.cfg.round_deadline:
                self.close_round(t)


##############################
# AGGREGATION SERVER         #
##############################


class ServerActor(Actor):
    role = Role.SERVER

    def __init__(
        self,
        cfg: ProtocolConfig,
        keys: PartyKeys,
        rng: EntropySource,
        *,
        tamper: bool = False,
        star: bool = False,
        roster: Mapping[PartyId, KeyAnnounce] | None = None,
    ) -> None:
        super().__init__(cfg, keys, rng, star=star, roster=roster)
        self.tamper = tamper
        self.state: ServerState = server_setup(cfg, keys)
        self.round_nodes: dict[int, tuple[int, ...]] = {}
        self.node_msgs: dict[int, dict[int, AggregatedMaskMsg]] = {}
        self.recovered_masks: dict[int, dict[int, MaskVector]] = {}
        self.results: dict[int, RoundResult] = {}
        self.errors: dict[int, RoundError] = {}
        self._relayed: Counter[tuple[int, int]] = Counter()
        self._reconciled: set[int] = set()
        self._recovering: dict[int, set[int]] = {}
        self._opened: dict[int, float] = {}

    @property
    def done(self) -> bool:
        return len(self.results) >= self.cfg.T

    def announce(self) -> None:
        if not self.cfg.malicious:
            return
        with self.timed(SETUP):
            announcement = self.keys.announcement()
            for i in range(self.cfg.n):
                self.send(PartyId.user(i), announcement)
            for j in range(self.cfg.pool):
                self.send(PartyId.node(j), announcement)

    def _route(self, dest: PartyId) -> PartyId:
        return dest

    def _relay(self, dest: PartyId, frame: Frame) -> None:
        assert self.endpoint is not None
        self.endpoint.forward(dest, frame)

    def nodes_for(self, t: int) -> tuple[int, ...]:
        if t not in self.round_nodes:
            self.round_nodes[t] = select_assisting_nodes(
                self.cfg.pool, self.cfg.k, round_beacon(t), self.state.recovered
            )
        return self.round_nodes[t]

    def begin_round(self, t: int, nodes: Sequence[int]) -> None:
        self.round_nodes[t] = tuple(sorted(nodes))

    def handle(self, frame: Frame, message: Message) -> None:
        sender = frame.sender
        if isinstance(message, KeyAnnounce):
            server_register(self.state, sender, message, self.roster)
            if self.star:
                self._relay_announcement(frame)
        elif isinstance(message, SecretCiphertext) and self.star:
            self._relay(PartyId.user(message.user), frame)
        elif isinstance(message, ParticipationMsg) and self.star:
            server_record_participation(self.state, sender, message)
            self._relay_participation(frame, message)
        elif isinstance(message, MaskedUpdate):
            if server_ingest_update(self.state, sender, message):
                self._opened.setdefault(message.t, time.monotonic())
        elif isinstance(message, AggregatedMaskMsg) and sender.role is Role.NODE:
            self._on_node_aggregate(sender.index, message)
        elif isinstance(message, RecoveryShare) and sender.role is Role.NODE:
            self._on_recovery_share(sender, message)
        else:
            msg = f"Unexpected {frame.msg_type.name} from {sender}"
            raise RejectedMessage(msg)

    def _relay_announcement(self, frame: Frame) -> None:
        if frame.sender.role is Role.USER:
            targets = [PartyId.node(j) for j in range(self.cfg.pool)]
        else:
            targets = [PartyId.user(i) for i in range(self.cfg.n)]
        for dest in targets:
            self._relay(dest, frame)

    def _relay_participation(self, frame: Frame, message: ParticipationMsg) -> None:
        # a user sends one participation per selected node, in node order
        key = (message.t, frame.sender.index)
        position = self._relayed[key]
        nodes = self.nodes_for(message.t)
        if position >= len(nodes):
            msg = f"Surplus participation from {frame.sender}"
            raise RejectedMessage(msg)
        self._relayed[key] += 1
        self._relay(PartyId.node(nodes[position]), frame)

    def _on_node_aggregate(self, j: int, message: AggregatedMaskMsg) -> None:
        t = message.t
        if t in self.results:
            msg = f"Aggregate for finalized iteration {t}"
            raise RejectedMessage(msg)
        if j not in self.nodes_for(t):
            msg = f"Node {j} is not assisting iteration {t}"
            raise RejectedMessage(msg)
        self.node_msgs.setdefault(t, {})[j] = message
        self._finalize_when_complete(t)

    def _on_recovery_share(self, sender: PartyId, share: RecoveryShare) -> None:
        pending = [
            t for t, nodes in self._recovering.items() if share.dropped_node in nodes
        ]
        if not pending:
            msg = f"No recovery of node {share.dropped_node} in progress"
            raise RejectedMessage(msg)
        t = pending[0]
        held = server_store_recovery_share(self.state, sender, share)
        if held < self.cfg.shares_needed:
            return
        self._recovering[t].discard(share.dropped_node)
        mask = server_recover_node(self.state, share.dropped_node, t)
        self.recovered_masks.setdefault(t, {})[share.dropped_node] = mask
        self._finalize_when_complete(t)

    def _finalize_when_complete(self, t: int) -> None:
        have = set(self.node_msgs.get(t, {})) | set(self.recovered_masks.get(t, {}))
        if have >= set(self.nodes_for(t)):
            self._finalize(t)

    def close_round(self, t: int) -> None:
        """The deadline for ``t`` passed; recover missing nodes or give up."""
        if t in self.results:
            return
        with self.timed(AGGREGATION):
            have = set(self.node_msgs.get(t, {})) | set(self.recovered_masks.get(t, {}))
            missing = set(self.nodes_for(t)) - have
            if missing and self.cfg.recovery and t not in self._recovering:
                self._recovering[t] = set(missing)
                logger.info(
                    "requesting shares of nodes %s for iteration %d", sorted(missing), t
                )
                for dropped in sorted(missing):
                    for j in range(self.cfg.pool):
                        if j not in missing:
                            self.send(PartyId.node(j), RecoveryShare(dropped, 0, 0))
                return
            self._finalize(t)

    def _finalize(self, t: int) -> None:
        try:
            result = server_finalize_round(
                self.state,
                t,
                self.node_msgs.get(t, {}),
                self.nodes_for(t),
                self.recovered_masks.get(t),
            )
        except ListMismatch as exc:
            if self.cfg.reconcile and t not in self._reconciled:
                self._reconcile(t, exc)
                return
            self._abort(t, exc)
            return
        except RoundError as exc:
            self._abort(t, exc)
            return
        if self.tamper:
            tampered = result.w_t.copy()
            tampered[:1] += 1
            result = server_sign_result(
                self.state,
                RoundResult(
                    t=t,
                    w_t=tampered,
                    contributor_count=result.contributor_count,
                    proof=result.proof,
                ),
            )
        self._publish(result)

    def _reconcile(self, t: int, exc: ListMismatch) -> None:
        logger.warning("iteration %d: %s; reconciling user lists", t, exc)
        self._reconciled.add(t)
        request = server_reconcile_request(self.state, t)
        self.node_msgs[t] = {}
        for j in self.nodes_for(t):
            self.send(PartyId.node(j), request)

    def _abort(self, t: int, exc: RoundError) -> None:
        logger.warning("iteration %d aborted: %s", t, exc)
        self.errors[t] = exc
        self._publish(server_abort_round(self.state, t))

    def _publish(self, result: RoundResult) -> None:
        self.results[result.t] = result
        self.node_msgs.pop(result.t, None)
        for i in range(self.cfg.n):
            self.send(PartyId.user(i), result)

    def tick(self, now: float) -> None:
        for t, opened in list(self._opened.items()):
            if t in self.results:
                del self._opened[t]
            elif now - opened >= 2 * self.cfg.round_deadline:
                # a second expiry while recovering finalizes without the node
                self._opened[t] = now
                self.close_round(t)


def serve(
    actor: Actor,
    inbox: queue.Queue[Frame] | queue.Queue[Frame | None],
    *,
    poll: float = 0.05,
    timeout: float | None = None,
) -> None:
    """Feed frames from ``inbox`` to ``actor`` until it is done or the link closes."""
    stop = None if timeout is None else time.monotonic() + timeout
    while not actor.done:
        if stop is not None and time.monotonic() >= stop:
            logger.warning("%s gave up after %.1f s", actor.party, timeout)
            return
        try:
            frame = inbox.get(timeout=poll)
        except queue.Empty:
            pass
        else:
            if frame is None:
                logger.info("%s: connection closed", actor.party)
                return
            actor.on_frame(frame)
        actor.tick(time.monotonic())
