"""State machines for users, assisting nodes and the aggregation server.

Every function here is a pure transition on a role's state plus inbound
messages; nothing in this module touches a socket or a clock. The actors in
:mod:`eseafl.roles` feed these functions from a transport.

Setup runs in two steps. :func:`party_keygen` creates a party's key pairs and
the announcement it publishes; once a party holds the announcements of its
peers it calls its ``*_setup`` function. Secrets distributed by assisting
nodes (the commitment key and, with master-derived seeds, the per-user mask
seeds) reach users through :func:`user_install_secret`.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np

from .commit import (
    ApvcKey,
    apvc_commit,
    apvc_compute_proof,
    apvc_keygen,
    apvc_setup,
    apvc_verify_proof,
)
from .crypto import (
    RHO_NONCE,
    SEED_NONCE,
    SharedSeed,
    ShamirShare,
    ae_decrypt,
    ae_encrypt,
    derive_master_seed,
    kx_derive,
    kx_keygen,
    random_scalar,
    scalar_to_bytes,
    shamir_reconstruct,
    shamir_share,
    sig_keygen,
    sig_sign,
    sig_verify,
)
from .errors import (
    BadNodeSignature,
    BadSignature,
    BelowThreshold,
    ConfigurationError,
    EmptyList,
    InvalidK,
    InvalidPoint,
    LengthMismatch,
    ListMismatch,
    MissingNodeMessage,
    RejectedMessage,
    ReplayedIteration,
    StaleIteration,
    UnknownUser,
)
from .masking import (
    MaskVector,
    QuantizationConfig,
    apply_mask,
    derive_user_mask,
    node_aggregate_mask,
    quantize,
    unmask_sum,
)
from .messages import (
    AggregatedMaskMsg,
    KeyAnnounce,
    MaskedUpdate,
    ParticipationMsg,
    PartyId,
    ReconcileRequest,
    RecoveryShare,
    Role,
    RoundResult,
    SecretCiphertext,
    SecretKind,
)
from .transport import (
    DEFAULT_MAX_FRAME,
    WireFormat,
    masked_update_signing_bytes,
    node_aggregate_signing_bytes,
    participation_signing_bytes,
    round_result_signing_bytes,
)

TYPE_CHECKING = False
if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence
    from typing import Final

    import numpy.typing as npt

    from .commit import ApvcParams, Commitment
    from .crypto import EntropySource, KxKeyPair, SigKeyPair
    from .masking import GradientVector

logger = logging.getLogger(__name__)

BEACON_LABEL: Final = b"e-seafl-beacon"
RHO_DEALER: Final = 0


class Mode(Enum):
    SEMI_HONEST = "sh"
    MALICIOUS = "mal"


class SeedSource(Enum):
    # per-user seeds from key exchange; a dropped node cannot be recovered
    KX = "kx"
    # per-user seeds derived from a node master secret that is Shamir-shared
    MASTER = "master"


##############################
# CONFIGURATION              #
##############################


@dataclass(frozen=True)
class ProtocolConfig:
    n: int
    k: int
    d: int
    alpha: float = 0.5
    delta: float = 0.3
    T: int = 1
    mode: Mode = Mode.SEMI_HONEST
    integrity: bool = False
    quant: QuantizationConfig = field(default_factory=QuantizationConfig)
    round_deadline: float = 5.0
    list_digest: bool = True
    reconcile: bool = False
    seed_source: SeedSource = SeedSource.KX
    recovery_threshold: int | None = None
    pool_size: int | None = None
    max_frame_size: int = DEFAULT_MAX_FRAME

    def __post_init__(self) -> None:
        for name in ("n", "k", "d", "T"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                msg = f"Invalid value for {name}. Must be a positive integer: {value}"
                raise ConfigurationError(msg)
        if not 0 < self.alpha <= 1:
            msg = f"Invalid value for alpha. Must be in (0, 1]: {self.alpha}"
            raise ConfigurationError(msg)
        if not 0 <= self.delta < 1:
            msg = f"Invalid value for delta. Must be in [0, 1): {self.delta}"
            raise ConfigurationError(msg)
        if 1 - _exact(self.delta) < _exact(self.alpha):
            msg = (
                f"Dropout rate {self.delta} leaves fewer than the alpha={self.alpha} "
                "fraction of users online"
            )
            raise ConfigurationError(msg)
        if self.pool < self.k:
            msg = f"Node pool of {self.pool} cannot supply k={self.k} nodes"
            raise InvalidK(msg)
        if self.n > self.quant.n_max:
            msg = (
                f"n={self.n} exceeds the quantization headroom "
                f"n_max={self.quant.n_max}"
            )
            raise ConfigurationError(msg)
        if self.round_deadline <= 0:
            msg = f"Round deadline must be positive: {self.round_deadline}"
            raise ConfigurationError(msg)
        if self.recovery_threshold is not None:
            if self.seed_source is not SeedSource.MASTER:
                msg = "A recovery threshold requires master-derived seeds"
                raise ConfigurationError(msg)
            if not 1 <= self.recovery_threshold <= self.pool - 1:
                msg = (
                    f"Recovery threshold must be in 1..{self.pool - 1}: "
                    f"{self.recovery_threshold}"
                )
                raise ConfigurationError(msg)
        if self.seed_source is SeedSource.MASTER and self.pool < 2:
            msg = "Node recovery needs at least two assisting nodes"
            raise ConfigurationError(msg)

    @property
    def malicious(self) -> bool:
        return self.mode is Mode.MALICIOUS

    @property
    def pool(self) -> int:
        return self.pool_size if self.pool_size is not None else self.k

    @property
    def recovery(self) -> bool:
        return self.seed_source is SeedSource.MASTER

    @property
    def shares_needed(self) -> int:
        if self.recovery_threshold is not None:
            return self.recovery_threshold
        return self.pool // 2 + 1 if self.pool > 2 else 1

    @property
    def threshold(self) -> int:
        return threshold_count(self.alpha, self.n)

    @property
    def wire(self) -> WireFormat:
        return WireFormat(
            d=self.d,
            malicious=self.malicious,
            integrity=self.integrity,
            list_digest=self.list_digest,
        )


def _exact(value: float) -> Fraction:
    return Fraction(str(value))


def threshold_count(alpha: float, n: int) -> int:
    """Minimum participants, ``ceil(alpha * n)``, computed without float error."""
    return max(1, math.ceil(_exact(alpha) * n))


def list_digest(users: Iterable[int]) -> bytes:
    """SHA-256 over the sorted user ordinals as 4-byte little-endian integers."""
    return hashlib.sha256(
        b"".join(u.to_bytes(4, "little") for u in sorted(set(users)))
    ).digest()


##############################
# NODE SELECTION             #
##############################


def round_beacon(t: int) -> bytes:
    return hashlib.sha256(BEACON_LABEL + t.to_bytes(4, "big")).digest()


def select_assisting_nodes(
    pool_size: int,
    k: int,
    beacon: bytes,
    excluded: Iterable[int] = (),
) -> tuple[int, ...]:
    """Pick ``k`` distinct node indices from the pool, in canonical order.

    A Fisher-Yates shuffle driven by a PRG seeded with the public ``beacon``;
    every party computing this with the same beacon gets the same subset.
    """
    blocked = set(excluded)
    candidates = [j for j in range(pool_size) if j not in blocked]
    if not 1 <= k <= len(candidates):
        msg = f"Cannot select k={k} nodes from {len(candidates)} available"
        raise InvalidK(msg)
    if len(beacon) != 32:
        msg = f"Beacon must be 32 bytes, got {len(beacon)}"
        raise ValueError(msg)
    prg = random.Random(beacon)
    for i in range(len(candidates) - 1, 0, -1):
        j = prg.randrange(i + 1)
        candidates[i], candidates[j] = candidates[j], candidates[i]
    return tuple(sorted(candidates[:k]))


##############################
# KEYS                       #
##############################


@dataclass(frozen=True)
class PartyKeys:
    party: PartyId
    kx: KxKeyPair | None = None
    sig: SigKeyPair | None = None

    def announcement(self) -> KeyAnnounce:
        return KeyAnnounce(
            kx_pk=self.kx.public if self.kx else None,
            sig_pk=self.sig.public if self.sig else None,
        )


def party_keygen(
    cfg: ProtocolConfig, party: PartyId, rng: EntropySource
) -> tuple[PartyKeys, KeyAnnounce]:
    """Fresh key pairs for ``party``; the server holds only a signing key."""
    kx = kx_keygen(rng) if party.role is not Role.SERVER else None
    sig = sig_keygen(rng) if cfg.malicious else None
    keys = PartyKeys(party=party, kx=kx, sig=sig)
    return keys, keys.announcement()


def check_roster(
    roster: Mapping[PartyId, KeyAnnounce] | None,
    party: PartyId,
    announce: KeyAnnounce,
) -> None:
    """Reject announcements that disagree with a pre-distributed roster."""
    if roster is None:
        return
    expected = roster.get(party)
    if expected is None:
        msg = f"{party} is not on the roster"
        raise UnknownUser(msg)
    if expected.kx_pk != announce.kx_pk or (
        expected.sig_pk is not None and expected.sig_pk != announce.sig_pk
    ):
        msg = f"Announcement from {party} does not match the roster"
        raise UnknownUser(msg)


def _sign(keys: PartyKeys, data: bytes) -> bytes:
    if keys.sig is None:
        msg = f"{keys.party} has no signing key"
        raise ConfigurationError(msg)
    return sig_sign(keys.sig.secret, data)


def _require_signature(
    public: bytes | None, data: bytes, sigma: bytes | None, what: str
) -> None:
    if public is None or sigma is None or not sig_verify(public, data, sigma):
        msg = f"Invalid signature on {what}"
        raise BadSignature(msg)


def _kx_public(announce: KeyAnnounce, party: PartyId) -> bytes:
    if announce.kx_pk is None:
        msg = f"{party} announced no key-exchange key"
        raise InvalidPoint(msg)
    return announce.kx_pk


def _apvc_params(cfg: ProtocolConfig) -> ApvcParams | None:
    return apvc_setup(cfg.d) if cfg.integrity else None


##############################
# USER                       #
##############################


@dataclass
class UserState:
    cfg: ProtocolConfig
    keys: PartyKeys
    kx_seeds: dict[int, SharedSeed]
    seeds: dict[int, SharedSeed]
    node_sig_pks: dict[int, bytes] = field(default_factory=dict)
    server_sig_pk: bytes | None = None
    rho: ApvcKey | None = None
    params: ApvcParams | None = None
    watermark: int = 0

    @property
    def index(self) -> int:
        return self.keys.party.index


def user_setup(
    cfg: ProtocolConfig,
    keys: PartyKeys,
    node_announces: Mapping[int, KeyAnnounce],
    server_announce: KeyAnnounce | None = None,
) -> UserState:
    """Derive one seed per pool node from the nodes' announced keys."""
    if keys.kx is None:
        msg = "A user needs a key-exchange key pair"
        raise ConfigurationError(msg)
    missing = [j for j in range(cfg.pool) if j not in node_announces]
    if missing:
        msg = f"Missing announcements from nodes {missing}"
        raise EmptyList(msg)
    kx_seeds = {
        j: kx_derive(keys.kx.secret, _kx_public(node_announces[j], PartyId.node(j)))
        for j in range(cfg.pool)
    }
    state = UserState(
        cfg=cfg,
        keys=keys,
        kx_seeds=kx_seeds,
        seeds=dict(kx_seeds) if not cfg.recovery else {},
        params=_apvc_params(cfg),
    )
    if cfg.malicious:
        for j in range(cfg.pool):
            if node_announces[j].sig_pk is None:
                msg = f"Node {j} announced no signature key"
                raise InvalidPoint(msg)
            state.node_sig_pks[j] = node_announces[j].sig_pk  # type: ignore[assignment]
        if server_announce is None or server_announce.sig_pk is None:
            msg = "Malicious mode requires the server's signature key"
            raise ConfigurationError(msg)
        state.server_sig_pk = server_announce.sig_pk
    return state


def user_install_secret(state: UserState, node: int, ct: SecretCiphertext) -> None:
    """Decrypt a secret that assisting node ``node`` addressed to this user."""
    if ct.user != state.index:
        msg = f"Secret addressed to user {ct.user}, not {state.index}"
        raise UnknownUser(msg)
    seed = state.kx_seeds.get(node)
    if seed is None:
        msg = f"No shared seed with node {node}"
        raise UnknownUser(msg)
    if ct.kind is SecretKind.RHO:
        if node != RHO_DEALER:
            msg = f"Node {node} is not the commitment-key dealer"
            raise RejectedMessage(msg)
        plain = ae_decrypt(seed, ct.ciphertext, RHO_NONCE)
        state.rho = ApvcKey(int.from_bytes(plain, "big"))
    else:
        plain = ae_decrypt(seed, ct.ciphertext, SEED_NONCE)
        state.seeds[node] = SharedSeed(plain)


def user_ready(state: UserState) -> bool:
    if len(state.seeds) < state.cfg.pool:
        return False
    return state.rho is not None or not state.cfg.integrity


def user_mask_update(
    state: UserState, t: int, x: GradientVector, nodes: Sequence[int]
) -> tuple[MaskedUpdate, list[tuple[int, ParticipationMsg]]]:
    """Mask an already quantized ring vector for iteration ``t``."""
    cfg = state.cfg
    if t <= state.watermark:
        msg = f"User {state.index} already produced an update for iteration {t}"
        raise ReplayedIteration(msg)
    if len(x) != cfg.d:
        msg = f"Update has {len(x)} elements, expected {cfg.d}"
        raise LengthMismatch(msg)
    if len(set(nodes)) != cfg.k:
        msg = f"Expected {cfg.k} distinct assisting nodes, got {list(nodes)}"
        raise InvalidK(msg)
    if not user_ready(state):
        msg = f"User {state.index} has not received all setup secrets"
        raise ConfigurationError(msg)

    mask = derive_user_mask(
        [state.seeds[j] for j in sorted(nodes)], t, cfg.d, cfg.integrity
    )
    cm: Commitment | None = None
    if cfg.integrity:
        assert state.params is not None and state.rho is not None
        cm = apvc_commit(state.params, state.rho, x, mask.r_lane or 0)
    update = MaskedUpdate(t=t, y=apply_mask(x, mask), cm=cm)
    participation = ParticipationMsg(t=t)
    if cfg.malicious:
        wire = cfg.wire
        update = MaskedUpdate(
            t=t,
            y=update.y,
            cm=cm,
            sigma=_sign(state.keys, masked_update_signing_bytes(update, wire)),
        )
        participation = ParticipationMsg(
            t=t, sigma=_sign(state.keys, participation_signing_bytes(participation))
        )
    state.watermark = t
    return update, [(j, participation) for j in sorted(nodes)]


def user_round(
    state: UserState,
    t: int,
    w: npt.ArrayLike,
    nodes: Sequence[int] | None = None,
) -> tuple[MaskedUpdate, list[tuple[int, ParticipationMsg]]]:
    """Quantize a real-valued update and mask it for iteration ``t``."""
    if nodes is None:
        nodes = select_assisting_nodes(state.cfg.pool, state.cfg.k, round_beacon(t))
    return user_mask_update(state, t, quantize(w, state.cfg.quant), nodes)


def user_verify_result(state: UserState, result: RoundResult) -> bool:
    """Check the server's proof that ``w_t`` is the honest aggregate."""
    if not state.cfg.integrity:
        msg = "Result verification requires integrity mode"
        raise ConfigurationError(msg)
    if result.aborted or result.proof is None or result.proof.t != result.t:
        return False
    assert state.params is not None
    if state.rho is None:
        return False
    try:
        return apvc_verify_proof(state.params, state.rho, result.w_t, result.proof)
    except LengthMismatch:
        return False


def user_accept_result(state: UserState, result: RoundResult) -> bool:
    """Every check a user applies before adopting a round result."""
    if result.aborted:
        return False
    if state.cfg.malicious:
        signed = round_result_signing_bytes(result, state.cfg.wire)
        if (
            state.server_sig_pk is None
            or result.sigma is None
            or not sig_verify(state.server_sig_pk, signed, result.sigma)
        ):
            return False
    if state.cfg.integrity:
        return user_verify_result(state, result)
    return True


##############################
# ASSISTING NODE             #
##############################


@dataclass
class NodeState:
    cfg: ProtocolConfig
    keys: PartyKeys
    seeds: dict[int, SharedSeed]
    user_sig_pks: dict[int, bytes] = field(default_factory=dict)
    is_rho_dealer: bool = False
    master: int | None = None
    lists: dict[int, set[int]] = field(default_factory=dict)
    emitted: dict[int, AggregatedMaskMsg] = field(default_factory=dict)
    held_shares: dict[int, ShamirShare] = field(default_factory=dict)
    watermark: int = 0

    @property
    def index(self) -> int:
        return self.keys.party.index


def node_setup(
    cfg: ProtocolConfig,
    keys: PartyKeys,
    user_announces: Mapping[int, KeyAnnounce],
    rng: EntropySource,
    is_rho_dealer: bool = False,
) -> tuple[NodeState, list[tuple[int, SecretCiphertext]]]:
    """Derive per-user seeds and produce the secrets this node distributes.

    The commitment-key dealer encrypts a fresh key to every user. With
    master-derived seeds every node also encrypts each user's mask seed.
    """
    if keys.kx is None:
        msg = "An assisting node needs a key-exchange key pair"
        raise ConfigurationError(msg)
    missing = [i for i in range(cfg.n) if i not in user_announces]
    if missing:
        msg = f"Missing announcements from users {missing}"
        raise EmptyList(msg)
    kx_seeds = {
        i: kx_derive(keys.kx.secret, _kx_public(user_announces[i], PartyId.user(i)))
        for i in range(cfg.n)
    }
    state = NodeState(
        cfg=cfg, keys=keys, seeds=dict(kx_seeds), is_rho_dealer=is_rho_dealer
    )
    if cfg.malicious:
        for i in range(cfg.n):
            if user_announces[i].sig_pk is None:
                msg = f"User {i} announced no signature key"
                raise InvalidPoint(msg)
            state.user_sig_pks[i] = user_announces[i].sig_pk  # type: ignore[assignment]

    outbound = []
    if cfg.recovery:
        state.master = random_scalar(rng)
        for i in range(cfg.n):
            seed = derive_master_seed(state.master, i)
            state.seeds[i] = seed
            ct = ae_encrypt(kx_seeds[i], seed.value, SEED_NONCE)
            outbound.append((i, SecretCiphertext(SecretKind.SEED, i, ct)))
    if is_rho_dealer and cfg.integrity:
        rho = apvc_keygen(rng)
        for i in range(cfg.n):
            ct = ae_encrypt(kx_seeds[i], scalar_to_bytes(rho.rho), RHO_NONCE)
            outbound.append((i, SecretCiphertext(SecretKind.RHO, i, ct)))
    return state, outbound


def _verify_participation(
    state: NodeState, user: int, message: ParticipationMsg
) -> None:
    if user not in state.seeds:
        msg = f"Participation from unregistered user {user}"
        raise UnknownUser(msg)
    if state.cfg.malicious:
        _require_signature(
            state.user_sig_pks.get(user),
            participation_signing_bytes(message),
            message.sigma,
            f"participation of user {user}",
        )


def node_handle_participation(
    state: NodeState, sender: PartyId, message: ParticipationMsg
) -> bool:
    """Add the sender to the node's list for ``message.t``.

    Returns whether the list grew; a repeated participation is accepted and
    leaves the list unchanged. Rejections raise :class:`RejectedMessage`.
    """
    if sender.role is not Role.USER:
        msg = f"Participation from non-user {sender}"
        raise UnknownUser(msg)
    if message.t <= state.watermark:
        msg = f"Participation for closed iteration {message.t}"
        raise StaleIteration(msg)
    _verify_participation(state, sender.index, message)
    users = state.lists.setdefault(message.t, set())
    if sender.index in users:
        return False
    users.add(sender.index)
    return True


def _aggregate_for(
    state: NodeState, t: int, users: Iterable[int]
) -> AggregatedMaskMsg:
    cfg = state.cfg
    listed = sorted(users)
    if len(listed) < cfg.threshold:
        msg = (
            f"Node {state.index} saw {len(listed)} participants in iteration {t}, "
            f"needs {cfg.threshold}"
        )
        raise BelowThreshold(msg)
    mask = node_aggregate_mask(
        [state.seeds[i] for i in listed], t, cfg.d, cfg.integrity
    )
    out = AggregatedMaskMsg(
        t=t,
        list_len=len(listed),
        a=mask.elems,
        r_lane_sum=mask.r_lane,
        list_digest=list_digest(listed) if cfg.list_digest else None,
    )
    if cfg.malicious:
        sigma = _sign(state.keys, node_aggregate_signing_bytes(out, cfg.wire))
        out = AggregatedMaskMsg(
            t=t,
            list_len=out.list_len,
            a=out.a,
            r_lane_sum=out.r_lane_sum,
            list_digest=out.list_digest,
            sigma=sigma,
        )
    state.watermark = max(state.watermark, t)
    state.emitted[t] = out
    return out


def node_emit_aggregate(state: NodeState, t: int) -> AggregatedMaskMsg:
    """Close iteration ``t`` and produce the node's aggregate mask."""
    if t <= state.watermark and t not in state.lists:
        msg = f"Iteration {t} is already closed"
        raise StaleIteration(msg)
    users = state.lists.get(t, set())
    out = _aggregate_for(state, t, users)
    logger.debug(
        "node %d closed iteration %d with %d users", state.index, t, out.list_len
    )
    return out


def node_handle_reconcile(
    state: NodeState, request: ReconcileRequest
) -> AggregatedMaskMsg:
    """Adopt exactly the server's list, keeping only verifiable entries."""
    if request.t < state.watermark:
        msg = f"Reconciliation for closed iteration {request.t}"
        raise StaleIteration(msg)
    verified = set()
    for user, participation in request.participations:
        if participation.t != request.t:
            continue
        try:
            _verify_participation(state, user, participation)
        except RejectedMessage as exc:
            logger.warning("reconcile entry for user %d rejected: %s", user, exc)
            continue
        verified.add(user)
    state.lists[request.t] = verified
    return _aggregate_for(state, request.t, verified)


def node_share_master(
    state: NodeState, rng: EntropySource
) -> list[tuple[int, RecoveryShare]]:
    """Shamir-share the master secret; share ``j + 1`` goes to node ``j``."""
    cfg = state.cfg
    if state.master is None:
        msg = "Master secret sharing requires master-derived seeds"
        raise ConfigurationError(msg)
    shares = shamir_share(state.master, cfg.shares_needed, cfg.pool, rng)
    return [
        (share.index - 1, RecoveryShare(state.index, share.index, share.value))
        for share in shares
        if share.index - 1 != state.index
    ]


def node_store_share(state: NodeState, sender: PartyId, share: RecoveryShare) -> None:
    if sender.role is not Role.NODE or sender.index != share.dropped_node:
        msg = f"{sender} cannot deposit a share of node {share.dropped_node}"
        raise RejectedMessage(msg)
    if share.share_index != state.index + 1:
        msg = f"Share {share.share_index} is not addressed to node {state.index}"
        raise RejectedMessage(msg)
    state.held_shares[share.dropped_node] = ShamirShare(
        share.share_index, share.value
    )


def node_reveal_share(state: NodeState, dropped: int) -> RecoveryShare:
    share = state.held_shares.get(dropped)
    if share is None:
        msg = f"Node {state.index} holds no share of node {dropped}"
        raise RejectedMessage(msg)
    return RecoveryShare(dropped, share.index, share.value)


##############################
# AGGREGATION SERVER         #
##############################


@dataclass
class ServerState:
    cfg: ProtocolConfig
    keys: PartyKeys
    user_sig_pks: dict[int, bytes] = field(default_factory=dict)
    node_sig_pks: dict[int, bytes] = field(default_factory=dict)
    params: ApvcParams | None = None
    updates: dict[int, dict[int, MaskedUpdate]] = field(default_factory=dict)
    participations: dict[int, dict[int, ParticipationMsg]] = field(
        default_factory=dict
    )
    recovery_shares: dict[int, dict[int, ShamirShare]] = field(default_factory=dict)
    recovered: set[int] = field(default_factory=set)
    watermark: int = 0


def server_setup(cfg: ProtocolConfig, keys: PartyKeys) -> ServerState:
    return ServerState(cfg=cfg, keys=keys, params=_apvc_params(cfg))


def server_register(
    state: ServerState,
    party: PartyId,
    announce: KeyAnnounce,
    roster: Mapping[PartyId, KeyAnnounce] | None = None,
) -> None:
    """Record a user's or node's signature key; only needed in malicious mode."""
    check_roster(roster, party, announce)
    limit = state.cfg.n if party.role is Role.USER else state.cfg.pool
    if party.role is Role.SERVER or not 0 <= party.index < limit:
        msg = f"{party} is not part of this deployment"
        raise UnknownUser(msg)
    if not state.cfg.malicious:
        return
    if announce.sig_pk is None:
        msg = f"{party} announced no signature key"
        raise BadSignature(msg)
    table = state.user_sig_pks if party.role is Role.USER else state.node_sig_pks
    table[party.index] = announce.sig_pk


def _check_user(state: ServerState, sender: PartyId) -> None:
    if sender.role is not Role.USER or not 0 <= sender.index < state.cfg.n:
        msg = f"Message from unregistered party {sender}"
        raise UnknownUser(msg)


def server_ingest_update(
    state: ServerState, sender: PartyId, message: MaskedUpdate
) -> bool:
    """Buffer a masked update; returns whether it was new."""
    cfg = state.cfg
    _check_user(state, sender)
    if message.t <= state.watermark:
        msg = f"Update for closed iteration {message.t}"
        raise StaleIteration(msg)
    if len(message.y) != cfg.d:
        msg = f"Update has {len(message.y)} elements, expected {cfg.d}"
        raise LengthMismatch(msg)
    if cfg.integrity and message.cm is None:
        msg = "Update carries no commitment"
        raise RejectedMessage(msg)
    if cfg.malicious:
        _require_signature(
            state.user_sig_pks.get(sender.index),
            masked_update_signing_bytes(message, cfg.wire),
            message.sigma,
            f"update of {sender}",
        )
    bucket = state.updates.setdefault(message.t, {})
    previous = bucket.get(sender.index)
    if previous is not None:
        if previous != message:
            msg = f"Conflicting update from {sender} for iteration {message.t}"
            raise RejectedMessage(msg)
        return False
    bucket[sender.index] = message
    return True


def server_record_participation(
    state: ServerState, sender: PartyId, message: ParticipationMsg
) -> None:
    """Keep a relayed participation message for a later reconciliation."""
    _check_user(state, sender)
    if message.t <= state.watermark:
        msg = f"Participation for closed iteration {message.t}"
        raise StaleIteration(msg)
    state.participations.setdefault(message.t, {}).setdefault(sender.index, message)


def server_reconcile_request(state: ServerState, t: int) -> ReconcileRequest:
    """Build the list the nodes must adopt and trim the buffered updates to it."""
    seen = state.participations.get(t, {})
    updates = state.updates.get(t, {})
    users = sorted(set(seen) & set(updates))
    for user in set(updates) - set(users):
        del updates[user]
    return ReconcileRequest(t=t, participations=tuple((u, seen[u]) for u in users))


def server_store_recovery_share(
    state: ServerState, sender: PartyId, share: RecoveryShare
) -> int:
    """Keep a revealed share; returns how many shares of that node are held."""
    if sender.role is not Role.NODE or share.share_index != sender.index + 1:
        msg = f"{sender} cannot reveal share {share.share_index}"
        raise RejectedMessage(msg)
    held = state.recovery_shares.setdefault(share.dropped_node, {})
    held[sender.index] = ShamirShare(share.share_index, share.value)
    return len(held)


def recover_offline_node_mask(
    shares: Sequence[ShamirShare],
    user_list: Iterable[int],
    t: int,
    cfg: ProtocolConfig,
) -> MaskVector:
    """Rebuild a dropped node's aggregate mask from shares of its master secret."""
    master = shamir_reconstruct(shares, cfg.shares_needed)
    seeds = [derive_master_seed(master, i) for i in sorted(user_list)]
    return node_aggregate_mask(seeds, t, cfg.d, cfg.integrity)


def server_recover_node(state: ServerState, dropped: int, t: int) -> MaskVector:
    shares = list(state.recovery_shares.get(dropped, {}).values())
    mask = recover_offline_node_mask(shares, state.updates.get(t, {}), t, state.cfg)
    state.recovered.add(dropped)
    logger.info("recovered the mask of node %d for iteration %d", dropped, t)
    return mask


def _check_node_message(
    state: ServerState, j: int, message: AggregatedMaskMsg, t: int, users: list[int]
) -> None:
    cfg = state.cfg
    if cfg.malicious:
        public = state.node_sig_pks.get(j)
        signed = node_aggregate_signing_bytes(message, cfg.wire)
        if (
            public is None
            or message.sigma is None
            or not sig_verify(public, signed, message.sigma)
        ):
            msg = f"Invalid signature on the aggregate of node {j}"
            raise BadNodeSignature(msg)
    if message.t != t:
        msg = f"Node {j} sent an aggregate for iteration {message.t}, expected {t}"
        raise ListMismatch(msg)
    if message.list_len != len(users):
        msg = f"Node {j} listed {message.list_len} users, the server has {len(users)}"
        raise ListMismatch(msg)
    if cfg.list_digest and message.list_digest != list_digest(users):
        msg = f"User list of node {j} differs from the server's"
        raise ListMismatch(msg)
    if cfg.integrity and message.r_lane_sum is None:
        msg = f"Node {j} sent no randomness lane"
        raise ListMismatch(msg)


def server_finalize_round(
    state: ServerState,
    t: int,
    node_msgs: Mapping[int, AggregatedMaskMsg],
    nodes: Sequence[int],
    recovered: Mapping[int, MaskVector] | None = None,
) -> RoundResult:
    """Unmask the sum of iteration ``t`` once every list agrees."""
    cfg = state.cfg
    recovered = recovered or {}
    bucket = state.updates.get(t, {})
    users = sorted(bucket)
    if len(users) < cfg.threshold:
        msg = (
            f"Only {len(users)} users contributed to iteration {t}, "
            f"needs {cfg.threshold}"
        )
        raise BelowThreshold(msg)

    masks: list[MaskVector] = []
    for j in nodes:
        if j in node_msgs:
            node_msg = node_msgs[j]
            _check_node_message(state, j, node_msg, t, users)
            masks.append(MaskVector(node_msg.a, node_msg.r_lane_sum))
        elif j in recovered:
            masks.append(recovered[j])
        else:
            msg = f"No aggregate from node {j} for iteration {t}"
            raise MissingNodeMessage(msg)

    ys = [bucket[u].y for u in users]
    w_t = unmask_sum(ys, masks)
    proof = None
    if cfg.integrity:
        assert state.params is not None
        cms = [bucket[u].cm for u in users]
        proof = apvc_compute_proof(
            state.params,
            [cm for cm in cms if cm is not None],
            [mask.r_lane or 0 for mask in masks],
            t,
        )
    result = RoundResult(t=t, w_t=w_t, contributor_count=len(users), proof=proof)
    _close(state, t)
    logger.info("finalized iteration %d with %d contributors", t, len(users))
    return server_sign_result(state, result)


def server_sign_result(state: ServerState, result: RoundResult) -> RoundResult:
    if not state.cfg.malicious:
        return result
    sigma = _sign(state.keys, round_result_signing_bytes(result, state.cfg.wire))
    return RoundResult(
        t=result.t,
        w_t=result.w_t,
        contributor_count=result.contributor_count,
        proof=result.proof,
        sigma=sigma,
    )


def server_abort_round(state: ServerState, t: int) -> RoundResult:
    """The result broadcast when iteration ``t`` cannot be finalized."""
    _close(state, t)
    logger.info("aborted iteration %d", t)
    empty = RoundResult(
        t=t, w_t=np.zeros(state.cfg.d, dtype=np.uint32), contributor_count=0
    )
    return server_sign_result(state, empty)


def _close(state: ServerState, t: int) -> None:
    state.watermark = max(state.watermark, t)
    state.updates.pop(t, None)
    state.participations.pop(t, None)
