"""Authenticated Pedersen vector commitments and the proof of honest aggregation.

A commitment to ``x`` under key ``rho`` with randomness ``r`` is the point
``h^r * prod_i g_i^(rho * x_i)``. Commitments multiply homomorphically, which
lets the server fold every online user's commitment and cancel the
randomness lanes reported by the assisting nodes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

from btclib.ec.curve import mult, multi_mult, secp256k1
from btclib.ec.sec_point import bytes_from_point, point_from_octets
from btclib.exceptions import BTClibValueError

from .crypto import GROUP_ORDER, random_scalar
from .errors import EmptyList, InvalidPoint, LengthMismatch

TYPE_CHECKING = False
if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence
    from typing import Final, TypeAlias

    from .crypto import EntropySource

    Point: TypeAlias = tuple[int, int]

DEFAULT_LABEL: Final = b"e-seafl-apvc-v1"
POINT_SIZE: Final = 33

# btclib's affine encoding of the point at infinity
IDENTITY: Final = (1, 0)
_IDENTITY_BYTES: Final = bytes(POINT_SIZE)


##############################
# GROUP HELPERS              #
##############################


def is_identity(point: Point) -> bool:
    return point[1] == 0


def point_add(first: Point, second: Point) -> Point:
    return secp256k1.add(first, second)


def point_neg(point: Point) -> Point:
    return secp256k1.negate(point)


def point_mul(scalar: int, point: Point) -> Point:
    scalar %= GROUP_ORDER
    if scalar == 0 or is_identity(point):
        return IDENTITY
    return mult(scalar, point, secp256k1)


def point_sum(points: Iterable[Point]) -> Point:
    total = IDENTITY
    for point in points:
        total = point_add(total, point)
    return total


def multi_exp(scalars: Sequence[int], points: Sequence[Point]) -> Point:
    pairs = [(s % GROUP_ORDER, p) for s, p in zip(scalars, points)]
    pairs = [(s, p) for s, p in pairs if s != 0]
    if not pairs:
        return IDENTITY
    if len(pairs) == 1:
        return mult(pairs[0][0], pairs[0][1], secp256k1)
    return multi_mult([s for s, _ in pairs], [p for _, p in pairs], secp256k1)


def encode_point(point: Point) -> bytes:
    if is_identity(point):
        return _IDENTITY_BYTES
    return bytes_from_point(point, secp256k1, compressed=True)


def decode_point(data: bytes) -> Point:
    if len(data) != POINT_SIZE:
        msg = f"Point encoding must be {POINT_SIZE} bytes, got {len(data)}"
        raise InvalidPoint(msg)
    if data == _IDENTITY_BYTES:
        return IDENTITY
    try:
        return point_from_octets(data, secp256k1)
    except BTClibValueError as exc:
        msg = "Not a valid secp256k1 point encoding"
        raise InvalidPoint(msg) from exc


@lru_cache(maxsize=None)
def hash_to_point(label: bytes, index: int) -> Point:
    """Try-and-increment hash to curve; nobody knows a discrete log of the result."""
    counter = 0
    while True:
        digest = hashlib.sha256(
            label + index.to_bytes(4, "big") + counter.to_bytes(4, "big")
        ).digest()
        x = int.from_bytes(digest, "big")
        if x < secp256k1.p:
            try:
                return x, secp256k1.y_even(x)
            except BTClibValueError:
                pass
        counter += 1


##############################
# APVC                       #
##############################


@dataclass(frozen=True)
class ApvcParams:
    generators: tuple[Point, ...]
    h: Point

    @property
    def d(self) -> int:
        return len(self.generators)


@dataclass(frozen=True)
class ApvcKey:
    rho: int

    def __post_init__(self) -> None:
        if not 0 < self.rho < GROUP_ORDER:
            msg = "Commitment key must be a nonzero scalar below the group order"
            raise ValueError(msg)


@dataclass(frozen=True)
class Commitment:
    point: Point

    def to_bytes(self) -> bytes:
        return encode_point(self.point)

    @classmethod
    def from_bytes(cls, data: bytes) -> Commitment:
        return cls(decode_point(data))


@dataclass(frozen=True)
class AggregationProof:
    x_t: Point
    t: int

    def to_bytes(self) -> bytes:
        return encode_point(self.x_t)


def apvc_setup(d: int, label: bytes = DEFAULT_LABEL) -> ApvcParams:
    """Derive ``h`` from index 0 and ``g_1..g_d`` from indices 1..d."""
    if d < 1:
        msg = f"Vector length must be positive, got {d}"
        raise ValueError(msg)
    return ApvcParams(
        generators=tuple(hash_to_point(label, i) for i in range(1, d + 1)),
        h=hash_to_point(label, 0),
    )


def apvc_keygen(rng: EntropySource) -> ApvcKey:
    return ApvcKey(random_scalar(rng))


def _keyed_exponents(key: ApvcKey, x: Sequence[int]) -> list[int]:
    return [key.rho * int(v) % GROUP_ORDER for v in x]


def apvc_commit(
    params: ApvcParams, key: ApvcKey, x: Sequence[int], r: int
) -> Commitment:
    if len(x) != params.d:
        msg = f"Vector has {len(x)} elements, parameters expect {params.d}"
        raise LengthMismatch(msg)
    exponents = [r % GROUP_ORDER, *_keyed_exponents(key, x)]
    return Commitment(multi_exp(exponents, [params.h, *params.generators]))


def apvc_aggregate_commitments(cms: Sequence[Commitment]) -> Commitment:
    if not cms:
        msg = "Cannot aggregate an empty list of commitments"
        raise EmptyList(msg)
    return Commitment(point_sum(cm.point for cm in cms))


def apvc_compute_proof(
    params: ApvcParams,
    cms: Sequence[Commitment],
    node_r_lane_sums: Sequence[int],
    t: int,
) -> AggregationProof:
    """Fold the users' commitments and strip ``h^(sum of node lanes)``."""
    if not node_r_lane_sums:
        msg = "At least one assisting node lane is required"
        raise EmptyList(msg)
    folded = apvc_aggregate_commitments(cms).point
    lanes = sum(node_r_lane_sums) % GROUP_ORDER
    return AggregationProof(
        x_t=point_add(folded, point_neg(point_mul(lanes, params.h))), t=t
    )


def apvc_verify_proof(
    params: ApvcParams, key: ApvcKey, w_t: Sequence[int], proof: AggregationProof
) -> bool:
    if len(w_t) != params.d:
        msg = f"Result has {len(w_t)} elements, parameters expect {params.d}"
        raise LengthMismatch(msg)
    expected = multi_exp(_keyed_exponents(key, w_t), params.generators)
    return expected == proof.x_t
