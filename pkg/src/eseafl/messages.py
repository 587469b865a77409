"""Messages exchanged between users, assisting nodes and the aggregation server."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

TYPE_CHECKING = False
if TYPE_CHECKING:
    from .commit import AggregationProof, Commitment
    from .masking import GradientVector


class Role(IntEnum):
    USER = 1
    NODE = 2
    SERVER = 3


class MessageType(IntEnum):
    KEY_ANNOUNCE = 0x01
    RHO_CIPHERTEXT = 0x02
    PARTICIPATION = 0x03
    MASKED_UPDATE = 0x04
    NODE_AGGREGATE = 0x05
    ROUND_RESULT = 0x06
    RECONCILE_REQUEST = 0x07
    RECOVERY_SHARE = 0x08


class SecretKind(IntEnum):
    RHO = 0
    SEED = 1


@dataclass(frozen=True, order=True)
class PartyId:
    role: Role
    index: int

    def __str__(self) -> str:
        return f"{self.role.name.lower()}-{self.index}"

    @classmethod
    def user(cls, index: int) -> PartyId:
        return cls(Role.USER, index)

    @classmethod
    def node(cls, index: int) -> PartyId:
        return cls(Role.NODE, index)

    @classmethod
    def server(cls) -> PartyId:
        return cls(Role.SERVER, 0)


@dataclass(frozen=True)
class KeyAnnounce:
    kx_pk: bytes | None
    sig_pk: bytes | None = None


@dataclass(frozen=True)
class SecretCiphertext:
    kind: SecretKind
    user: int
    ciphertext: bytes


@dataclass(frozen=True)
class ParticipationMsg:
    t: int
    sigma: bytes | None = None


def _vectors_equal(first: GradientVector, second: GradientVector) -> bool:
    return first.shape == second.shape and np.array_equal(first, second)


@dataclass(frozen=True, eq=False)
class MaskedUpdate:
    t: int
    y: GradientVector
    cm: Commitment | None = None
    sigma: bytes | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskedUpdate):
            return NotImplemented
        return (
            (self.t, self.cm, self.sigma) == (other.t, other.cm, other.sigma)
        ) and _vectors_equal(self.y, other.y)


@dataclass(frozen=True, eq=False)
class AggregatedMaskMsg:
    t: int
    list_len: int
    a: GradientVector
    r_lane_sum: int | None = None
    list_digest: bytes | None = None
    sigma: bytes | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AggregatedMaskMsg):
            return NotImplemented
        mine = (self.t, self.list_len, self.r_lane_sum, self.list_digest, self.sigma)
        theirs = (
            other.t,
            other.list_len,
            other.r_lane_sum,
            other.list_digest,
            other.sigma,
        )
        return mine == theirs and _vectors_equal(self.a, other.a)


@dataclass(frozen=True, eq=False)
class RoundResult:
    """Server output for one iteration.

    A ``contributor_count`` of zero marks an aborted round; ``w_t`` is then all
    zeros and carries no information.
    """

    t: int
    w_t: GradientVector
    contributor_count: int
    proof: AggregationProof | None = None
    sigma: bytes | None = None

    @property
    def aborted(self) -> bool:
        return self.contributor_count == 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RoundResult):
            return NotImplemented
        mine = (self.t, self.contributor_count, self.proof, self.sigma)
        theirs = (other.t, other.contributor_count, other.proof, other.sigma)
        return mine == theirs and _vectors_equal(self.w_t, other.w_t)


@dataclass(frozen=True)
class ReconcileRequest:
    t: int
    participations: tuple[tuple[int, ParticipationMsg], ...]


@dataclass(frozen=True)
class RecoveryShare:
    dropped_node: int
    share_index: int
    value: int


Message = (
    KeyAnnounce
    | SecretCiphertext
    | ParticipationMsg
    | MaskedUpdate
    | AggregatedMaskMsg
    | RoundResult
    | ReconcileRequest
    | RecoveryShare
)
