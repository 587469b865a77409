"""Fixed-point quantization and mask arithmetic over the ring Z_(2^32).

Vectors are numpy ``uint32`` arrays so that element-wise addition wraps
modulo 2^32 natively. Randomness lanes for commitments are Python ints mod p.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crypto import GROUP_ORDER, prf_derive_scalar, prf_expand_masks
from .errors import ConfigurationError, EmptyList, LengthMismatch

TYPE_CHECKING = False
if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence
    from typing import Final, TypeAlias

    import numpy.typing as npt

    from .crypto import SharedSeed

    GradientVector: TypeAlias = npt.NDArray[np.uint32]

RING_MODULUS: Final = 2**32
ELEMENT_SIZE: Final = 4


@dataclass(frozen=True)
class QuantizationConfig:
    frac_bits: int = 16
    element_bound: int = 2**20
    n_max: int = 4096

    def __post_init__(self) -> None:
        if not 0 <= self.frac_bits < 32:
            msg = f"Invalid value for frac_bits: {self.frac_bits}"
            raise ConfigurationError(msg)
        if self.element_bound < 2 or self.element_bound % 2:
            msg = f"Element bound must be an even number >= 2: {self.element_bound}"
            raise ConfigurationError(msg)
        if self.n_max < 1 or self.n_max * self.element_bound > RING_MODULUS:
            msg = (
                f"n_max * element_bound must not exceed 2^32 "
                f"({self.n_max} * {self.element_bound})"
            )
            raise ConfigurationError(msg)

    @property
    def bias(self) -> int:
        return self.element_bound // 2

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits


@dataclass(frozen=True, eq=False)
class MaskVector:
    elems: GradientVector
    r_lane: int | None = None

    @property
    def d(self) -> int:
        return len(self.elems)

    @classmethod
    def zeros(cls, d: int, integrity: bool = False) -> MaskVector:
        return cls(np.zeros(d, dtype=np.uint32), 0 if integrity else None)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskVector):
            return NotImplemented
        return self.r_lane == other.r_lane and np.array_equal(self.elems, other.elems)

    __hash__ = None  # type: ignore[assignment]


def to_ring(values: Iterable[int]) -> GradientVector:
    return np.array([int(v) % RING_MODULUS for v in values], dtype=np.uint32)


def ring_sum(vectors: Sequence[GradientVector]) -> GradientVector:
    if not vectors:
        msg = "Cannot sum an empty list of vectors"
        raise EmptyList(msg)
    d = len(vectors[0])
    if any(len(v) != d for v in vectors):
        msg = "All vectors must have the same length"
        raise LengthMismatch(msg)
    return np.sum(np.stack(vectors), axis=0, dtype=np.uint32)


def quantize(x: npt.ArrayLike, cfg: QuantizationConfig) -> GradientVector:
    """Bias-encode signed reals into [0, B): ``round(x * 2^f) + B/2``, saturating."""
    scaled = np.rint(np.asarray(x, dtype=np.float64) * cfg.scale) + cfg.bias
    return np.clip(scaled, 0, cfg.element_bound - 1).astype(np.uint32)


def dequantize(
    total: GradientVector, n_contributors: int, cfg: QuantizationConfig
) -> npt.NDArray[np.float64]:
    if n_contributors < 1:
        msg = "Need at least one contributor to dequantize"
        raise ValueError(msg)
    shifted = total.astype(np.float64) - n_contributors * cfg.bias
    return shifted / (n_contributors * cfg.scale)


def _expand_all(
    seeds: Sequence[SharedSeed], t: int, d: int, integrity: bool
) -> MaskVector:
    elems = ring_sum([prf_expand_masks(seed, t, d) for seed in seeds])
    r_lane = None
    if integrity:
        r_lane = sum(prf_derive_scalar(seed, t) for seed in seeds) % GROUP_ORDER
    return MaskVector(elems, r_lane)


def derive_user_mask(
    seeds: Sequence[SharedSeed], t: int, d: int, integrity: bool = False
) -> MaskVector:
    """Sum of one PRF expansion per assisting node the user shares a seed with."""
    if not seeds:
        msg = "A user needs at least one assisting-node seed"
        raise EmptyList(msg)
    return _expand_all(seeds, t, d, integrity)


def node_aggregate_mask(
    seeds: Sequence[SharedSeed], t: int, d: int, integrity: bool = False
) -> MaskVector:
    """Sum of the PRF expansions of every user on a node's list."""
    if not seeds:
        msg = "Assisting node list is empty"
        raise EmptyList(msg)
    return _expand_all(seeds, t, d, integrity)


def apply_mask(w: GradientVector, a: MaskVector) -> GradientVector:
    if len(w) != a.d:
        msg = f"Update has {len(w)} elements, mask has {a.d}"
        raise LengthMismatch(msg)
    return w + a.elems


def unmask_sum(
    ys: Sequence[GradientVector], node_masks: Sequence[MaskVector]
) -> GradientVector:
    if not node_masks:
        msg = "No assisting-node masks to remove"
        raise EmptyList(msg)
    total = ring_sum(ys)
    masks = ring_sum([mask.elems for mask in node_masks])
    if len(masks) != len(total):
        msg = f"Updates have {len(total)} elements, masks have {len(masks)}"
        raise LengthMismatch(msg)
    return total - masks
