from __future__ import annotations

import itertools
import random

import numpy as np
import pytest

from eseafl.crypto import (
    GROUP_ORDER,
    RHO_NONCE,
    SEED_NONCE,
    SIGNATURE_SIZE,
    SharedSeed,
    ShamirShare,
    ae_decrypt,
    ae_encrypt,
    derive_master_seed,
    kx_derive,
    kx_keygen,
    prf_derive_scalar,
    prf_expand_masks,
    public_from_secret,
    random_scalar,
    shamir_reconstruct,
    shamir_share,
    sig_keygen,
    sig_sign,
    sig_verify,
)
from eseafl.errors import (
    AuthFailure,
    DuplicateIndex,
    InsufficientShares,
    InvalidPoint,
    InvalidThreshold,
)


class TestKeyAgreement:
    def test_symmetric(self, rng: random.Random) -> None:
        for _ in range(100):
            alice, bob = kx_keygen(rng), kx_keygen(rng)
            assert kx_derive(alice.secret, bob.public) == kx_derive(
                bob.secret, alice.public
            )

    def test_distinct_pairs_distinct_seeds(self, rng: random.Random) -> None:
        a, b, c = kx_keygen(rng), kx_keygen(rng), kx_keygen(rng)
        assert kx_derive(a.secret, b.public) != kx_derive(a.secret, c.public)

    def test_public_is_compressed(self, rng: random.Random) -> None:
        pair = kx_keygen(rng)
        assert len(pair.public) == 33
        assert pair.public[0] in (2, 3)
        assert public_from_secret(pair.secret) == pair.public

    @pytest.mark.parametrize(
        "public", [b"", bytes(33), b"\x02" + b"\xff" * 32, b"\x05" + bytes(32)]
    )
    def test_invalid_point(self, rng: random.Random, public: bytes) -> None:
        with pytest.raises(InvalidPoint):
            kx_derive(kx_keygen(rng).secret, public)

    def test_random_scalar_range(self, rng: random.Random) -> None:
        for _ in range(100):
            assert 0 < random_scalar(rng, 7) < 7
        assert 0 < random_scalar(rng) < GROUP_ORDER


class TestSignatures:
    def test_sign_verify(self, rng: random.Random) -> None:
        pair = sig_keygen(rng)
        signature = sig_sign(pair.secret, b"masked update")
        assert len(signature) == SIGNATURE_SIZE
        assert sig_verify(pair.public, b"masked update", signature)

    def test_wrong_message(self, rng: random.Random) -> None:
        pair = sig_keygen(rng)
        signature = sig_sign(pair.secret, b"masked update")
        assert not sig_verify(pair.public, b"masked updatf", signature)

    def test_wrong_key(self, rng: random.Random) -> None:
        signer, other = sig_keygen(rng), sig_keygen(rng)
        signature = sig_sign(signer.secret, b"x")
        assert not sig_verify(other.public, b"x", signature)

    @pytest.mark.parametrize("position", [0, 31, 32, 63])
    def test_flipped_byte(self, rng: random.Random, position: int) -> None:
        pair = sig_keygen(rng)
        signature = bytearray(sig_sign(pair.secret, b"x"))
        signature[position] ^= 0x01
        assert not sig_verify(pair.public, b"x", bytes(signature))

    @pytest.mark.parametrize(
        "signature", [b"", bytes(64), b"\xff" * 64, bytes(63), bytes(65)]
    )
    def test_malformed_returns_false(
        self, rng: random.Random, signature: bytes
    ) -> None:
        assert not sig_verify(sig_keygen(rng).public, b"x", signature)

    def test_malformed_key_returns_false(self, rng: random.Random) -> None:
        signature = sig_sign(sig_keygen(rng).secret, b"x")
        assert not sig_verify(b"\x02" + bytes(32), b"x", signature)


class TestAuthenticatedEncryption:
    def test_round_trip_and_size(self) -> None:
        seed = SharedSeed(bytes(range(32)))
        ciphertext = ae_encrypt(seed, b"\x07" * 32)
        assert len(ciphertext) == 48
        assert ae_decrypt(seed, ciphertext) == b"\x07" * 32

    def test_wrong_seed(self) -> None:
        ciphertext = ae_encrypt(SharedSeed(bytes(32)), b"secret")
        with pytest.raises(AuthFailure):
            ae_decrypt(SharedSeed(b"\x01" * 32), ciphertext)

    def test_nonce_separates_purposes(self) -> None:
        seed = SharedSeed(bytes(32))
        ciphertext = ae_encrypt(seed, b"secret", SEED_NONCE)
        assert ciphertext != ae_encrypt(seed, b"secret", RHO_NONCE)
        with pytest.raises(AuthFailure):
            ae_decrypt(seed, ciphertext, RHO_NONCE)

    def test_tampered(self) -> None:
        seed = SharedSeed(bytes(32))
        ciphertext = bytearray(ae_encrypt(seed, b"secret"))
        ciphertext[0] ^= 0x80
        with pytest.raises(AuthFailure):
            ae_decrypt(seed, bytes(ciphertext))

    def test_seed_length(self) -> None:
        with pytest.raises(ValueError, match="32 bytes"):
            SharedSeed(bytes(31))


class TestPRF:
    def test_deterministic(self) -> None:
        seed = SharedSeed(b"\x42" * 32)
        first = prf_expand_masks(seed, 3, 10)
        assert first.dtype == np.uint32
        assert np.array_equal(first, prf_expand_masks(seed, 3, 10))

    def test_prefix_property(self) -> None:
        seed = SharedSeed(b"\x42" * 32)
        assert np.array_equal(
            prf_expand_masks(seed, 1, 7), prf_expand_masks(seed, 1, 1000)[:7]
        )

    def test_iteration_separates_streams(self, rng: random.Random) -> None:
        d = 16
        for _ in range(100):
            seed = SharedSeed(rng.randbytes(32))
            t = rng.randrange(2**32 - 1)
            first = prf_expand_masks(seed, t, d)
            second = prf_expand_masks(seed, t + 1, d)
            assert np.count_nonzero(first != second) >= d // 2

    @pytest.mark.parametrize(("t", "d"), [(-1, 4), (2**32, 4), (1, 0)])
    def test_rejects_bad_arguments(self, t: int, d: int) -> None:
        with pytest.raises(ValueError):
            prf_expand_masks(SharedSeed(bytes(32)), t, d)

    def test_scalar_lane(self) -> None:
        seed = SharedSeed(b"\x42" * 32)
        value = prf_derive_scalar(seed, 5)
        assert 0 <= value < GROUP_ORDER
        assert value == prf_derive_scalar(seed, 5)
        assert value != prf_derive_scalar(seed, 6)

    def test_master_seed_per_user(self) -> None:
        assert derive_master_seed(12345, 0) != derive_master_seed(12345, 1)
        assert derive_master_seed(12345, 0) == derive_master_seed(12345, 0)


class TestShamir:
    @pytest.mark.parametrize(
        ("threshold", "shares"),
        [(t, n) for n in range(1, 9) for t in range(1, n + 1)],
    )
    def test_any_subset_reconstructs(
        self, rng: random.Random, threshold: int, shares: int
    ) -> None:
        secret = random_scalar(rng)
        issued = shamir_share(secret, threshold, shares, rng)
        assert [s.index for s in issued] == list(range(1, shares + 1))
        for subset in itertools.combinations(issued, threshold):
            assert shamir_reconstruct(subset, threshold) == secret

    def test_small_field(self, rng: random.Random) -> None:
        issued = shamir_share(5, 2, 4, rng, modulus=11)
        assert shamir_reconstruct(issued[2:], 2, modulus=11) == 5

    def test_below_threshold_reveals_nothing_useful(self, rng: random.Random) -> None:
        # with t-1 shares, every candidate secret stays consistent
        issued = shamir_share(3, 2, 3, rng, modulus=7)
        seen = {
            shamir_reconstruct([issued[0], ShamirShare(5, v)], 2, modulus=7)
            for v in range(7)
        }
        assert seen == set(range(7))

    @pytest.mark.parametrize(("threshold", "shares"), [(0, 3), (4, 3)])
    def test_invalid_threshold(
        self, rng: random.Random, threshold: int, shares: int
    ) -> None:
        with pytest.raises(InvalidThreshold):
            shamir_share(1, threshold, shares, rng)

    def test_too_many_shares_for_field(self, rng: random.Random) -> None:
        with pytest.raises(InvalidThreshold):
            shamir_share(1, 2, 7, rng, modulus=7)

    def test_insufficient(self, rng: random.Random) -> None:
        issued = shamir_share(9, 3, 5, rng)
        with pytest.raises(InsufficientShares):
            shamir_reconstruct(issued[:2], 3)

    def test_duplicate_index(self, rng: random.Random) -> None:
        issued = shamir_share(9, 2, 3, rng)
        with pytest.raises(DuplicateIndex):
            shamir_reconstruct([issued[0], issued[0]], 2)

    def test_zero_index(self) -> None:
        with pytest.raises(DuplicateIndex):
            shamir_reconstruct([ShamirShare(0, 1), ShamirShare(1, 2)], 2)
