"""Command-line entry points.

``eseafl server|node|user`` run one role each over TCP (users and nodes dial
the server, which relays between them). ``keygen-roster`` prepares the roster
and per-party key files they read. ``bench`` and ``demo`` run locally.

Failures exit non-zero and print ``{"error": ..., "type": ...}`` on stderr:
2 for usage errors, 1 for everything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path

import numpy as np

from ._version import __version__
from .config import (
    CONFIG_KEYS,
    QUANT_KEYS,
    build_protocol_config,
    config_to_mapping,
    load_config,
    merge_overrides,
    read_key_file,
    read_roster,
    write_key_file,
    write_roster,
)
from .errors import ConfigurationError, EseaflError, UsageError
from .harness import BenchSpec, generate_keys, run_bench, run_demo
from .messages import Role
from .protocol import Mode
from .roles import NodeActor, ServerActor, UserActor, serve
from .transport import TcpHub, TcpLink

TYPE_CHECKING = False
if TYPE_CHECKING:
    from collections.abc import Sequence
    from typing import Any, NoReturn

    from .messages import KeyAnnounce, PartyId, RoundResult
    from .protocol import PartyKeys, ProtocolConfig

logger = logging.getLogger(__name__)

DEFAULT_PORT = 7870


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def _int_list(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError:
        msg = f"expected comma-separated integers, got {value!r}"
        raise argparse.ArgumentTypeError(msg) from None


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("protocol configuration")
    group.add_argument("--config", type=Path, help="flat JSON configuration file")
    for key, convert in {**CONFIG_KEYS, **QUANT_KEYS}.items():
        flag = "--" + key.replace("_", "-")
        if key in {"integrity", "list_digest", "reconcile"}:
            group.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction)
        elif convert in (int, float):
            group.add_argument(flag, dest=key, type=convert)
        else:
            group.add_argument(flag, dest=key)


def _add_tcp_flags(parser: argparse.ArgumentParser, *, server: bool) -> None:
    parser.add_argument("--roster", type=Path, required=True)
    parser.add_argument("--keys", type=Path, required=True, help="own key file")
    parser.add_argument("--host", default="0.0.0.0" if server else "127.0.0.1")
    parser.add_argument("--port", type=int, default=DEFAULT_PORT)
    parser.add_argument("--timeout", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="eseafl", description="Secure aggregation with assisting nodes"
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        type=str.upper,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    keygen = sub.add_parser("keygen-roster", help="write a roster and key files")
    _add_config_flags(keygen)
    keygen.add_argument("--out-dir", type=Path, default=Path())
    keygen.add_argument("--seed", type=int, help="deterministic keys (testing)")

    server = sub.add_parser("server", help="run the aggregation server")
    _add_config_flags(server)
    _add_tcp_flags(server, server=True)
    server.add_argument("--tamper", action="store_true", help=argparse.SUPPRESS)

    node = sub.add_parser("node", help="run one assisting node")
    _add_config_flags(node)
    _add_tcp_flags(node, server=False)

    user = sub.add_parser("user", help="run one user")
    _add_config_flags(user)
    _add_tcp_flags(user, server=False)
    user.add_argument(
        "--input", type=Path, required=True, help="JSON list, one number per element"
    )
    user.add_argument(
        "--quantized", action="store_true", help="input already holds ring elements"
    )

    bench = sub.add_parser("bench", help="time and meter every role")
    bench.add_argument("--n", type=_int_list, default=BenchSpec.n_values)
    bench.add_argument("--k", type=int, default=BenchSpec.k)
    bench.add_argument("--d", type=int, default=BenchSpec.d)
    bench.add_argument("--mode", choices=[m.value for m in Mode], default="sh")
    bench.add_argument("--integrity", action="store_true")
    bench.add_argument("--reps", type=int, default=BenchSpec.repetitions)
    bench.add_argument(
        "--transport", choices=["inprocess", "tcp"], default="inprocess"
    )
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", type=Path, help="CSV destination (default: stdout)")

    demo = sub.add_parser("demo", help="federated linear regression, secure rounds")
    demo.add_argument("--rounds", type=int, default=20)
    demo.add_argument("--n", type=int, default=8)
    demo.add_argument("--k", type=int, default=2)
    demo.add_argument("--d", type=int, default=8)
    demo.add_argument("--mode", choices=[m.value for m in Mode], default="sh")
    demo.add_argument("--integrity", action="store_true")
    demo.add_argument("--tamper", action="store_true")
    demo.add_argument("--exact", action="store_true", help="quantize on the users")
    demo.add_argument("--seed", type=int, default=0)
    return parser


def _protocol_config(args: argparse.Namespace) -> ProtocolConfig:
    base = load_config(args.config) if args.config else {}
    overrides = {key: getattr(args, key) for key in {**CONFIG_KEYS, **QUANT_KEYS}}
    return build_protocol_config(merge_overrides(base, overrides))


def _load_identity(
    args: argparse.Namespace, role: Role
) -> tuple[PartyKeys, dict[PartyId, KeyAnnounce]]:
    keys = read_key_file(args.keys)
    if keys.party.role is not role:
        msg = f"{args.keys} belongs to {keys.party}, not a {role.name.lower()}"
        raise ConfigurationError(msg)
    roster = read_roster(args.roster)
    if keys.announcement() != roster.get(keys.party):
        msg = f"{args.keys} does not match the roster entry for {keys.party}"
        raise ConfigurationError(msg)
    return keys, roster


def _result_json(result: RoundResult, accepted: bool | None = None) -> str:
    data: dict[str, Any] = {
        "t": result.t,
        "contributors": result.contributor_count,
        "aborted": result.aborted,
        "w_t": result.w_t.tolist(),
    }
    if accepted is not None:
        data["accepted"] = accepted
    return json.dumps(data)


##############################
# SUBCOMMANDS                #
##############################


def _cmd_keygen(args: argparse.Namespace) -> int:
    cfg = _protocol_config(args)
    rng = random.Random(args.seed) if args.seed is not None else random.SystemRandom()
    keys = generate_keys(cfg, rng)
    out: Path = args.out_dir
    (out / "keys").mkdir(parents=True, exist_ok=True)
    write_roster(out / "roster.csv", keys)
    for party, entry in keys.items():
        write_key_file(out / "keys" / f"{party}.json", entry)
    (out / "config.json").write_text(
        json.dumps(config_to_mapping(cfg), indent=2) + "\n", encoding="utf-8"
    )
    logger.info("Wrote %d key files under %s", len(keys), out / "keys")
    return 0


def _cmd_server(args: argparse.Namespace) -> int:
    cfg = _protocol_config(args)
    keys, roster = _load_identity(args, Role.SERVER)
    if cfg.recovery:
        msg = "Node recovery needs direct node-to-node links, not a star relay"
        raise ConfigurationError(msg)
    hub = TcpHub(args.host, args.port, cfg.max_frame_size)
    hub.start()
    logger.info("Server listening on %s:%d", *hub.address)
    server = ServerActor(
        cfg,
        keys,
        random.SystemRandom(),
        tamper=args.tamper,
        star=True,
        roster=roster,
    )
    server.attach(hub.endpoint(server.party))
    server.announce()
    try:
        serve(server, hub.inbox, timeout=args.timeout)
    finally:
        hub.close()
    for t in sorted(server.results):
        print(_result_json(server.results[t]))
    return 0 if server.done else 1


def _client(args: argparse.Namespace, role: Role) -> int:
    cfg = _protocol_config(args)
    keys, roster = _load_identity(args, role)
    actor: NodeActor | UserActor
    if role is Role.NODE:
        actor = NodeActor(
            cfg, keys, random.SystemRandom(), auto_close=True, star=True, roster=roster
        )
    else:
        try:
            vector = json.loads(Path(args.input).read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            vector = None
        if not isinstance(vector, list) or len(vector) != cfg.d:
            msg = f"{args.input} must hold a JSON list of {cfg.d} numbers"
            raise ConfigurationError(msg)
        w = np.asarray(vector, dtype=np.int64 if args.quantized else np.float64)
        actor = UserActor(
            cfg,
            keys,
            random.SystemRandom(),
            inputs=lambda _t: w,
            rounds=cfg.T,
            quantized=args.quantized,
            star=True,
            roster=roster,
        )
    link = TcpLink(args.host, args.port, cfg.max_frame_size)
    actor.attach(link.endpoint(actor.party))
    actor.announce()
    try:
        serve(actor, link.inbox, timeout=args.timeout)
    finally:
        link.close()
    if isinstance(actor, UserActor):
        for t in sorted(actor.results):
            print(_result_json(actor.results[t], actor.accepted[t]))
        return 0 if actor.done and all(actor.accepted.values()) else 1
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    spec = BenchSpec(
        n_values=args.n,
        k=args.k,
        d=args.d,
        mode=Mode(args.mode),
        integrity=args.integrity,
        repetitions=args.reps,
        transport=args.transport,
        seed=args.seed,
    )
    report = run_bench(spec)
    if args.out is None:
        sys.stdout.write(report.csv)
    else:
        args.out.write_text(report.csv, encoding="utf-8")
        print(report.summary())
    return 0


def _cmd_demo(args: argparse.Namespace) -> int:
    report = run_demo(
        args.n,
        args.k,
        args.d,
        args.rounds,
        seed=args.seed,
        integrity=args.integrity,
        tamper=args.tamper,
        exact=args.exact,
        mode=Mode(args.mode),
    )
    print(report.table())
    print(f"max secure-plain gap: {report.max_gap():.3e}")
    return 0


_COMMANDS = {
    "keygen-roster": _cmd_keygen,
    "server": _cmd_server,
    "node": lambda args: _client(args, Role.NODE),
    "user": lambda args: _client(args, Role.USER),
    "bench": _cmd_bench,
    "demo": _cmd_demo,
}


def _fail(exc: Exception) -> None:
    print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)


def cli_main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _fail(exc)
        return 2
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        _fail(exc)
        return 2
    except (EseaflError, OSError) as exc:
        logger.debug("Command failed", exc_info=True)
        _fail(exc)
        return 1


def main() -> None:
    sys.exit(cli_main())
