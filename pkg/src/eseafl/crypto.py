"""Cryptographic primitives used by every role.

Key agreement and signatures run on secp256k1 through ``cryptography``; the
mask PRF is AES-128 in counter mode; Shamir sharing works over the group order.
All functions are pure given their inputs and the injected entropy source.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    AuthFailure,
    DuplicateIndex,
    InsufficientShares,
    InvalidPoint,
    InvalidThreshold,
)

TYPE_CHECKING = False
if TYPE_CHECKING:
    from collections.abc import Callable, Sequence
    from typing import Final, Protocol

    import numpy.typing as npt

    class EntropySource(Protocol):
        def randbytes(self, n: int, /) -> bytes: ...


class CurveGroup(NamedTuple):
    name: str
    curve: Callable[[], ec.EllipticCurve]
    order: int
    point_size: int


SECP256K1: Final = CurveGroup(
    name="secp256k1",
    curve=ec.SECP256K1,
    order=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141,
    point_size=33,
)
GROUP_ORDER: Final = SECP256K1.order

SEED_SIZE: Final = 32
SCALAR_SIZE: Final = 32
SIGNATURE_SIZE: Final = 64
TAG_SIZE: Final = 16

RHO_NONCE: Final = b"rho-dist".ljust(12, b"\0")
SEED_NONCE: Final = b"seed-dist".ljust(12, b"\0")

_SEED_INFO: Final = b"e-seafl-seed"
_MASK_LABEL: Final = b"mask"
_RHO_LANE_LABEL: Final = b"rho-lane"
_AE_LABEL: Final = b"ae-key"


@dataclass(frozen=True)
class SharedSeed:
    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != SEED_SIZE:
            msg = f"Seed must be {SEED_SIZE} bytes, got {len(self.value)}"
            raise ValueError(msg)


@dataclass(frozen=True)
class KxKeyPair:
    secret: bytes
    public: bytes


@dataclass(frozen=True)
class SigKeyPair:
    secret: bytes
    public: bytes


@dataclass(frozen=True)
class ShamirShare:
    index: int
    value: int


##############################
# SCALARS AND KEYS           #
##############################


def random_scalar(rng: EntropySource, order: int = GROUP_ORDER) -> int:
    """Rejection-sample a scalar uniformly from [1, order)."""
    size = (order.bit_length() + 7) // 8
    while True:
        candidate = int.from_bytes(rng.randbytes(size), "big")
        if 0 < candidate < order:
            return candidate


def scalar_to_bytes(value: int) -> bytes:
    return value.to_bytes(SCALAR_SIZE, "big")


def _private_key(secret: bytes, group: CurveGroup) -> ec.EllipticCurvePrivateKey:
    return ec.derive_private_key(int.from_bytes(secret, "big"), group.curve())


def _public_key(public: bytes, group: CurveGroup) -> ec.EllipticCurvePublicKey:
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(group.curve(), public)
    except ValueError as exc:
        msg = f"Not a valid {group.name} point encoding"
        raise InvalidPoint(msg) from exc


def _compressed(key: ec.EllipticCurvePrivateKey) -> bytes:
    return key.public_key().public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
    )


def public_from_secret(secret: bytes, group: CurveGroup = SECP256K1) -> bytes:
    return _compressed(_private_key(secret, group))


def kx_keygen(rng: EntropySource, group: CurveGroup = SECP256K1) -> KxKeyPair:
    secret = scalar_to_bytes(random_scalar(rng, group.order))
    return KxKeyPair(secret=secret, public=public_from_secret(secret, group))


def sig_keygen(rng: EntropySource, group: CurveGroup = SECP256K1) -> SigKeyPair:
    secret = scalar_to_bytes(random_scalar(rng, group.order))
    return SigKeyPair(secret=secret, public=public_from_secret(secret, group))


def kx_derive(
    my_secret: bytes, their_public: bytes, group: CurveGroup = SECP256K1
) -> SharedSeed:
    """ECDH followed by HKDF-SHA256; symmetric in the two parties."""
    shared = _private_key(my_secret, group).exchange(
        ec.ECDH(), _public_key(their_public, group)
    )
    seed = HKDF(
        algorithm=hashes.SHA256(), length=SEED_SIZE, salt=None, info=_SEED_INFO
    ).derive(shared)
    return SharedSeed(seed)


def derive_master_seed(master: int, user_index: int) -> SharedSeed:
    digest = hashlib.sha256(
        scalar_to_bytes(master) + user_index.to_bytes(4, "big")
    ).digest()
    return SharedSeed(digest)


##############################
# SIGNATURES                 #
##############################


def sig_sign(secret: bytes, message: bytes, group: CurveGroup = SECP256K1) -> bytes:
    """ECDSA-SHA256, returned as raw 32-byte r followed by 32-byte s."""
    der = _private_key(secret, group).sign(message, ec.ECDSA(hashes.SHA256()))
    r, s = decode_dss_signature(der)
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def sig_verify(
    public: bytes, message: bytes, signature: bytes, group: CurveGroup = SECP256K1
) -> bool:
    if len(signature) != SIGNATURE_SIZE:
        return False
    r = int.from_bytes(signature[:32], "big")
    s = int.from_bytes(signature[32:], "big")
    if not (0 < r < group.order and 0 < s < group.order):
        return False
    try:
        key = _public_key(public, group)
        key.verify(encode_dss_signature(r, s), message, ec.ECDSA(hashes.SHA256()))
    except (InvalidPoint, InvalidSignature, ValueError):
        return False
    return True


##############################
# AUTHENTICATED ENCRYPTION   #
##############################


def _ae_key(seed: SharedSeed) -> bytes:
    return hashlib.sha256(seed.value + _AE_LABEL).digest()


def ae_encrypt(seed: SharedSeed, plaintext: bytes, nonce: bytes = RHO_NONCE) -> bytes:
    """AES-256-GCM; the 16-byte tag is appended to the ciphertext."""
    return AESGCM(_ae_key(seed)).encrypt(nonce, plaintext, None)


def ae_decrypt(seed: SharedSeed, ciphertext: bytes, nonce: bytes = RHO_NONCE) -> bytes:
    try:
        return AESGCM(_ae_key(seed)).decrypt(nonce, ciphertext, None)
    except InvalidTag as exc:
        msg = "Ciphertext failed authentication"
        raise AuthFailure(msg) from exc


##############################
# PRF                        #
##############################


def _mask_key(seed: SharedSeed) -> bytes:
    return hashlib.sha256(seed.value + _MASK_LABEL).digest()[:16]


def prf_expand_masks(seed: SharedSeed, t: int, d: int) -> npt.NDArray[np.uint32]:
    """Expand ``seed`` into ``d`` words mod 2^32 for iteration ``t``.

    Counter block i is ``0^32 || t (32-bit BE) || i (64-bit BE)``; each block
    yields four little-endian words, so shorter expansions are prefixes of
    longer ones.
    """
    if not 0 <= t < 2**32:
        msg = f"Iteration {t} does not fit in 32 bits"
        raise ValueError(msg)
    if d < 1:
        msg = f"Vector length must be positive, got {d}"
        raise ValueError(msg)
    blocks = (d + 3) // 4
    counter = bytes(4) + t.to_bytes(4, "big") + bytes(8)
    encryptor = Cipher(algorithms.AES(_mask_key(seed)), modes.CTR(counter)).encryptor()
    stream = encryptor.update(bytes(16 * blocks)) + encryptor.finalize()
    return np.frombuffer(stream, dtype="<u4", count=d).astype(np.uint32)


def prf_derive_scalar(seed: SharedSeed, t: int, order: int = GROUP_ORDER) -> int:
    digest = hashlib.sha256(seed.value + _RHO_LANE_LABEL + t.to_bytes(4, "big"))
    return int.from_bytes(digest.digest(), "big") % order


##############################
# SHAMIR SECRET SHARING      #
##############################


def _random_below(rng: EntropySource, modulus: int) -> int:
    size = (modulus.bit_length() + 7) // 8 + 16
    return int.from_bytes(rng.randbytes(size), "big") % modulus


def shamir_share(
    secret: int,
    threshold: int,
    shares: int,
    rng: EntropySource,
    *,
    modulus: int = GROUP_ORDER,
) -> list[ShamirShare]:
    if not 1 <= threshold <= shares:
        msg = f"Threshold must be in 1..{shares}, got {threshold}"
        raise InvalidThreshold(msg)
    if shares >= modulus:
        msg = f"Cannot issue {shares} distinct shares modulo {modulus}"
        raise InvalidThreshold(msg)
    coeffs = [secret % modulus] + [
        _random_below(rng, modulus) for _ in range(threshold - 1)
    ]
    result = []
    for x in range(1, shares + 1):
        # Horner
        y = 0
        for c in reversed(coeffs):
            y = (y * x + c) % modulus
        result.append(ShamirShare(index=x, value=y))
    return result


def shamir_reconstruct(
    shares: Sequence[ShamirShare], threshold: int, *, modulus: int = GROUP_ORDER
) -> int:
    """Lagrange interpolation at zero over the first ``threshold`` shares."""
    indices = [share.index % modulus for share in shares]
    if len(set(indices)) != len(indices):
        msg = "Shares must have distinct indices"
        raise DuplicateIndex(msg)
    if 0 in indices:
        msg = "Share index must be nonzero"
        raise DuplicateIndex(msg)
    if threshold < 1 or len(shares) < threshold:
        msg = f"Need {threshold} shares, got {len(shares)}"
        raise InsufficientShares(msg)

    used = shares[:threshold]
    secret = 0
    for i, share in enumerate(used):
        num, den = 1, 1
        for j, other in enumerate(used):
            if i != j:
                num = num * other.index % modulus
                den = den * (other.index - share.index) % modulus
        secret = (secret + share.value * num * pow(den, -1, modulus)) % modulus
    return secret
