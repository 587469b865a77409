"""Configuration files, rosters and key files.

A deployment is described by a flat JSON object whose keys match the fields of
:class:`~eseafl.protocol.ProtocolConfig`, with the quantization parameters
(``frac_bits``, ``element_bound``, ``n_max``) inlined. Every key can be
overridden from the command line.

The roster is a CSV file with one line per party::

    role,index,kx_pk_hex,sig_pk_hex
    node,0,02ab...,03cd...

and each party keeps its secret keys in its own JSON key file.
"""

from __future__ import annotations

import json
from pathlib import Path

from prettytable import PrettyTable, from_csv

from .crypto import KxKeyPair, SigKeyPair, public_from_secret
from .errors import ConfigurationError
from .masking import QuantizationConfig
from .messages import KeyAnnounce, PartyId, Role
from .protocol import Mode, PartyKeys, ProtocolConfig, SeedSource

TYPE_CHECKING = False
if TYPE_CHECKING:
    from collections.abc import Callable, Mapping
    from typing import Any

ROSTER_FIELDS = ["role", "index", "kx_pk_hex", "sig_pk_hex"]

_MODES = {
    "sh": Mode.SEMI_HONEST,
    "semi-honest": Mode.SEMI_HONEST,
    "mal": Mode.MALICIOUS,
    "malicious": Mode.MALICIOUS,
}


def _bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in {"1", "true", "yes", "on"}:
        return True
    if isinstance(value, str) and value.lower() in {"0", "false", "no", "off"}:
        return False
    msg = f"Expected a boolean, got {value!r}"
    raise ConfigurationError(msg)


def _optional_int(value: Any) -> int | None:
    return None if value is None else int(value)


def _mode(value: Any) -> Mode:
    if isinstance(value, Mode):
        return value
    try:
        return _MODES[str(value).lower()]
    except KeyError:
        msg = f"Unknown mode {value!r}; expected one of {sorted(_MODES)}"
        raise ConfigurationError(msg) from None


def _seed_source(value: Any) -> SeedSource:
    try:
        return SeedSource(value)
    except ValueError:
        msg = f"Unknown seed source {value!r}; expected 'kx' or 'master'"
        raise ConfigurationError(msg) from None


CONFIG_KEYS: dict[str, Callable[[Any], Any]] = {
    "n": int,
    "k": int,
    "d": int,
    "alpha": float,
    "delta": float,
    "T": int,
    "mode": _mode,
    "integrity": _bool,
    "round_deadline": float,
    "list_digest": _bool,
    "reconcile": _bool,
    "seed_source": _seed_source,
    "recovery_threshold": _optional_int,
    "pool_size": _optional_int,
    "max_frame_size": int,
}
QUANT_KEYS: dict[str, Callable[[Any], Any]] = {
    "frac_bits": int,
    "element_bound": int,
    "n_max": int,
}


def load_config(path: str | Path) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        msg = f"{path} is not valid JSON: {exc}"
        raise ConfigurationError(msg) from exc
    if not isinstance(data, dict):
        msg = f"{path} must contain a JSON object"
        raise ConfigurationError(msg)
    return data


def merge_overrides(
    base: Mapping[str, Any], overrides: Mapping[str, Any]
) -> dict[str, Any]:
    """Apply the overrides that were actually given (``None`` means unset)."""
    merged = dict(base)
    merged.update({key: value for key, value in overrides.items() if value is not None})
    return merged


def build_protocol_config(mapping: Mapping[str, Any]) -> ProtocolConfig:
    unknown = set(mapping) - set(CONFIG_KEYS) - set(QUANT_KEYS)
    if unknown:
        msg = f"Unknown configuration keys: {', '.join(sorted(unknown))}"
        raise ConfigurationError(msg)
    try:
        fields = {k: CONFIG_KEYS[k](v) for k, v in mapping.items() if k in CONFIG_KEYS}
        quant = {k: QUANT_KEYS[k](v) for k, v in mapping.items() if k in QUANT_KEYS}
    except (TypeError, ValueError) as exc:
        msg = f"Invalid configuration value: {exc}"
        raise ConfigurationError(msg) from exc
    if quant:
        fields["quant"] = QuantizationConfig(**quant)
    try:
        return ProtocolConfig(**fields)
    except TypeError as exc:
        msg = f"Incomplete configuration: {exc}"
        raise ConfigurationError(msg) from exc


def config_to_mapping(cfg: ProtocolConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key in CONFIG_KEYS:
        value = getattr(cfg, key)
        out[key] = value.value if isinstance(value, (Mode, SeedSource)) else value
    for key in QUANT_KEYS:
        out[key] = getattr(cfg.quant, key)
    return out


##############################
# ROSTER                     #
##############################


def _parse_party(role: str, index: str) -> PartyId:
    try:
        return PartyId(Role[role.strip().upper()], int(index))
    except (KeyError, ValueError):
        msg = f"Invalid roster entry {role},{index}"
        raise ConfigurationError(msg) from None


def write_roster(path: str | Path, keys: Mapping[PartyId, PartyKeys]) -> None:
    table = PrettyTable(ROSTER_FIELDS)
    for party in sorted(keys):
        entry = keys[party]
        table.add_row(
            [
                party.role.name.lower(),
                party.index,
                entry.kx.public.hex() if entry.kx else "",
                entry.sig.public.hex() if entry.sig else "",
            ]
        )
    Path(path).write_text(table.get_csv_string(lineterminator="\n"), encoding="utf-8")


def read_roster(path: str | Path) -> dict[PartyId, KeyAnnounce]:
    with open(path, encoding="utf-8", newline="") as fp:
        table = from_csv(fp, delimiter=",")
    if table.field_names != ROSTER_FIELDS:
        msg = f"Roster header must be {','.join(ROSTER_FIELDS)}"
        raise ConfigurationError(msg)
    roster = {}
    for role, index, kx_hex, sig_hex in table.rows:
        party = _parse_party(role, index)
        try:
            roster[party] = KeyAnnounce(
                kx_pk=bytes.fromhex(kx_hex) if kx_hex else None,
                sig_pk=bytes.fromhex(sig_hex) if sig_hex else None,
            )
        except ValueError as exc:
            msg = f"Roster entry for {party} is not valid hex"
            raise ConfigurationError(msg) from exc
    return roster


##############################
# KEY FILES                  #
##############################


def write_key_file(path: str | Path, keys: PartyKeys) -> None:
    data = {
        "role": keys.party.role.name.lower(),
        "index": keys.party.index,
        "kx_secret": keys.kx.secret.hex() if keys.kx else None,
        "sig_secret": keys.sig.secret.hex() if keys.sig else None,
    }
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def read_key_file(path: str | Path) -> PartyKeys:
    data = load_config(path)
    party = _parse_party(str(data.get("role", "")), str(data.get("index", "")))
    try:
        kx_secret = bytes.fromhex(data["kx_secret"]) if data.get("kx_secret") else None
        sig_secret = (
            bytes.fromhex(data["sig_secret"]) if data.get("sig_secret") else None
        )
    except ValueError as exc:
        msg = f"{path} holds a malformed secret key"
        raise ConfigurationError(msg) from exc
    return PartyKeys(
        party=party,
        kx=KxKeyPair(kx_secret, public_from_secret(kx_secret)) if kx_secret else None,
        sig=SigKeyPair(sig_secret, public_from_secret(sig_secret))
        if sig_secret
        else None,
    )
