from __future__ import annotations

import random

import pytest

from eseafl.commit import (
    IDENTITY,
    POINT_SIZE,
    AggregationProof,
    ApvcParams,
    ApvcKey,
    Commitment,
    apvc_aggregate_commitments,
    apvc_commit,
    apvc_compute_proof,
    apvc_keygen,
    apvc_setup,
    apvc_verify_proof,
    decode_point,
    encode_point,
    hash_to_point,
    is_identity,
    multi_exp,
    point_add,
    point_mul,
    point_neg,
)
from eseafl.crypto import GROUP_ORDER
from eseafl.errors import EmptyList, InvalidPoint, LengthMismatch

D = 4


@pytest.fixture(scope="module")
def params() -> ApvcParams:
    return apvc_setup(D)


def _vector(rng: random.Random, bound: int = 2**20) -> list[int]:
    return [rng.randrange(bound) for _ in range(D)]


class TestGroupHelpers:
    def test_identity_laws(self) -> None:
        g = hash_to_point(b"test", 1)
        assert point_add(g, IDENTITY) == g
        assert is_identity(point_add(g, point_neg(g)))
        assert is_identity(point_mul(0, g))
        assert is_identity(point_mul(GROUP_ORDER, g))

    def test_scalar_multiplication_distributes(self) -> None:
        g = hash_to_point(b"test", 1)
        assert point_add(point_mul(5, g), point_mul(7, g)) == point_mul(12, g)

    def test_multi_exp_matches_naive(self, rng: random.Random) -> None:
        points = [hash_to_point(b"test", i) for i in range(5)]
        scalars = [rng.randrange(GROUP_ORDER) for _ in points]
        naive = IDENTITY
        for s, p in zip(scalars, points):
            naive = point_add(naive, point_mul(s, p))
        assert multi_exp(scalars, points) == naive
        assert multi_exp([0, 0], points[:2]) == IDENTITY

    def test_point_encoding(self) -> None:
        g = hash_to_point(b"test", 3)
        encoded = encode_point(g)
        assert len(encoded) == POINT_SIZE
        assert decode_point(encoded) == g
        assert encode_point(IDENTITY) == bytes(POINT_SIZE)
        assert decode_point(bytes(POINT_SIZE)) == IDENTITY

    @pytest.mark.parametrize(
        "data", [b"", bytes(32), b"\x04" + bytes(32), b"\x02" + b"\xff" * 32]
    )
    def test_invalid_encoding(self, data: bytes) -> None:
        with pytest.raises(InvalidPoint):
            decode_point(data)

    def test_generators_are_distinct(self) -> None:
        generators = [hash_to_point(b"test", i) for i in range(16)]
        assert len(set(generators)) == 16


class TestCommitments:
    @pytest.mark.slow
    def test_homomorphism(self, params: ApvcParams, rng: random.Random) -> None:
        key = apvc_keygen(rng)
        for _ in range(1000):
            x1, x2 = _vector(rng, GROUP_ORDER), _vector(rng, GROUP_ORDER)
            r1, r2 = rng.randrange(GROUP_ORDER), rng.randrange(GROUP_ORDER)
            combined = apvc_aggregate_commitments(
                [apvc_commit(params, key, x1, r1), apvc_commit(params, key, x2, r2)]
            )
            summed = [(a + b) % GROUP_ORDER for a, b in zip(x1, x2)]
            assert combined == apvc_commit(params, key, summed, r1 + r2)

    def test_binding_to_key(self, params: ApvcParams, rng: random.Random) -> None:
        x = _vector(rng)
        first, second = apvc_keygen(rng), apvc_keygen(rng)
        assert apvc_commit(params, first, x, 9) != apvc_commit(params, second, x, 9)

    def test_serialization(self, params: ApvcParams, rng: random.Random) -> None:
        cm = apvc_commit(params, apvc_keygen(rng), _vector(rng), 17)
        assert Commitment.from_bytes(cm.to_bytes()) == cm

    def test_length_mismatch(self, params: ApvcParams, rng: random.Random) -> None:
        with pytest.raises(LengthMismatch):
            apvc_commit(params, apvc_keygen(rng), [1, 2], 0)

    def test_empty_aggregation(self) -> None:
        with pytest.raises(EmptyList):
            apvc_aggregate_commitments([])

    @pytest.mark.parametrize("rho", [0, GROUP_ORDER, -1])
    def test_invalid_key(self, rho: int) -> None:
        with pytest.raises(ValueError):
            ApvcKey(rho)

    def test_setup_requires_positive_length(self) -> None:
        with pytest.raises(ValueError):
            apvc_setup(0)


def _honest_round(
    params: ApvcParams, key: ApvcKey, rng: random.Random, users: int = 5, nodes: int = 3
) -> tuple[list[int], AggregationProof, list[int]]:
    lanes = [[rng.randrange(GROUP_ORDER) for _ in range(nodes)] for _ in range(users)]
    xs = [_vector(rng) for _ in range(users)]
    cms = [
        apvc_commit(params, key, x, sum(lane) % GROUP_ORDER)
        for x, lane in zip(xs, lanes)
    ]
    node_sums = [sum(lane[j] for lane in lanes) % GROUP_ORDER for j in range(nodes)]
    w_t = [sum(column) for column in zip(*xs)]
    return w_t, apvc_compute_proof(params, cms, node_sums, t=1), node_sums


class TestAggregationProof:
    def test_completeness(self, params: ApvcParams, rng: random.Random) -> None:
        key = apvc_keygen(rng)
        for _ in range(100):
            w_t, proof, _ = _honest_round(params, key, rng)
            assert apvc_verify_proof(params, key, w_t, proof)

    @pytest.mark.parametrize("coordinate", range(D))
    def test_tampered_sum(
        self, params: ApvcParams, rng: random.Random, coordinate: int
    ) -> None:
        key = apvc_keygen(rng)
        w_t, proof, _ = _honest_round(params, key, rng)
        w_t[coordinate] += 1
        assert not apvc_verify_proof(params, key, w_t, proof)

    def test_tampered_proof(self, params: ApvcParams, rng: random.Random) -> None:
        key = apvc_keygen(rng)
        w_t, proof, _ = _honest_round(params, key, rng)
        forged = AggregationProof(point_add(proof.x_t, params.h), proof.t)
        assert not apvc_verify_proof(params, key, w_t, forged)

    def test_tampered_lane(self, params: ApvcParams, rng: random.Random) -> None:
        key = apvc_keygen(rng)
        lanes = [[rng.randrange(GROUP_ORDER) for _ in range(2)] for _ in range(3)]
        xs = [_vector(rng) for _ in range(3)]
        cms = [apvc_commit(params, key, x, sum(la)) for x, la in zip(xs, lanes)]
        node_sums = [sum(la[j] for la in lanes) for j in range(2)]
        node_sums[1] += 1
        proof = apvc_compute_proof(params, cms, node_sums, t=1)
        w_t = [sum(column) for column in zip(*xs)]
        assert not apvc_verify_proof(params, key, w_t, proof)

    def test_wrong_length(self, params: ApvcParams, rng: random.Random) -> None:
        key = apvc_keygen(rng)
        w_t, proof, _ = _honest_round(params, key, rng)
        with pytest.raises(LengthMismatch):
            apvc_verify_proof(params, key, w_t[:-1], proof)

    def test_proof_needs_node_lanes(
        self, params: ApvcParams, rng: random.Random
    ) -> None:
        cm = apvc_commit(params, apvc_keygen(rng), _vector(rng), 0)
        with pytest.raises(EmptyList):
            apvc_compute_proof(params, [cm], [], t=1)


class TestProofForgery:
    """A server without the key tries to pass off a different aggregate."""

    @pytest.mark.parametrize("trial", range(20))
    def test_adversary_cannot_shift_result(
        self, params: ApvcParams, rng: random.Random, trial: int
    ) -> None:
        key = apvc_keygen(rng)
        w_t, proof, _ = _honest_round(params, key, rng)
        delta = [rng.randrange(1, 2**20) for _ in range(D)]
        # best effort without rho: shift x_t by prod g_i^delta_i
        shift = multi_exp(delta, params.generators)
        forged = AggregationProof(point_add(proof.x_t, shift), proof.t)
        shifted = [w + dl for w, dl in zip(w_t, delta)]
        assert not apvc_verify_proof(params, key, shifted, forged)

    def test_adversary_with_key_succeeds(
        self, params: ApvcParams, rng: random.Random
    ) -> None:
        # sanity check of the game: knowing rho makes forging trivial
        key = apvc_keygen(rng)
        w_t, proof, _ = _honest_round(params, key, rng)
        delta = [3, 0, 0, 1]
        shift = multi_exp([key.rho * v for v in delta], params.generators)
        forged = AggregationProof(point_add(proof.x_t, shift), proof.t)
        shifted = [w + dl for w, dl in zip(w_t, delta)]
        assert apvc_verify_proof(params, key, shifted, forged)


class _Challenger:
    """Commits under a hidden key and judges a claimed forgery.

    ``log`` maps every queried randomness to the vector committed with it.
    """

    def __init__(self, params: ApvcParams, rng: random.Random) -> None:
        self.params = params
        self.key = apvc_keygen(rng)
        self.log: dict[int, list[int]] = {}

    def query(self, x: list[int], r: int) -> Commitment | None:
        r %= GROUP_ORDER
        if r in self.log:
            return None
        self.log[r] = list(x)
        return apvc_commit(self.params, self.key, x, r)

    def opens(
        self,
        x_star: list[int],
        cm_star: Commitment,
        randoms: list[int],
        constants: list[int],
    ) -> bool:
        combined = sum(c * r for c, r in zip(constants, randoms)) % GROUP_ORDER
        return cm_star == apvc_commit(self.params, self.key, x_star, combined)

    def wins(
        self,
        x_star: list[int],
        cm_star: Commitment,
        randoms: list[int],
        constants: list[int],
    ) -> bool:
        combined = sum(c * r for c, r in zip(constants, randoms)) % GROUP_ORDER
        if combined in self.log:
            return False
        if not any(c % GROUP_ORDER for c in constants):
            return False
        if not self.opens(x_star, cm_star, randoms, constants):
            return False
        if any(r % GROUP_ORDER not in self.log for r in randoms):
            return True
        combination = [
            sum(c * self.log[r % GROUP_ORDER][i] for c, r in zip(constants, randoms))
            % GROUP_ORDER
            for i in range(self.params.d)
        ]
        return [v % GROUP_ORDER for v in x_star] != combination


def _fresh_randomness(rng: random.Random, challenger: _Challenger) -> int:
    while True:
        r = rng.randrange(1, GROUP_ORDER)
        if r not in challenger.log:
            return r


class TestUnforgeabilityGame:
    def test_repeated_randomness_is_refused(
        self, params: ApvcParams, rng: random.Random
    ) -> None:
        challenger = _Challenger(params, rng)
        assert challenger.query(_vector(rng), 7) is not None
        assert challenger.query(_vector(rng), 7) is None

    @pytest.mark.parametrize("trial", range(10))
    def test_reuse_with_zero_constants(
        self, params: ApvcParams, rng: random.Random, trial: int
    ) -> None:
        challenger = _Challenger(params, rng)
        x = _vector(rng)
        r = _fresh_randomness(rng, challenger)
        cm = challenger.query(x, r)
        assert cm is not None
        assert not challenger.wins(x, cm, [r], [0])

    @pytest.mark.parametrize("trial", range(10))
    def test_honest_linear_combination(
        self, params: ApvcParams, rng: random.Random, trial: int
    ) -> None:
        challenger = _Challenger(params, rng)
        xs = [_vector(rng) for _ in range(3)]
        randoms = [_fresh_randomness(rng, challenger) for _ in xs]
        cms = [challenger.query(x, r) for x, r in zip(xs, randoms)]
        constants = [rng.randrange(1, 2**16) for _ in xs]
        cm_star = Commitment(
            multi_exp(constants, [cm.point for cm in cms if cm is not None])
        )
        x_star = [sum(c * x[i] for c, x in zip(constants, xs)) for i in range(D)]
        # the combination opens correctly but is exactly what the key holder allows
        assert challenger.opens(x_star, cm_star, randoms, constants)
        assert not challenger.wins(x_star, cm_star, randoms, constants)

    @pytest.mark.parametrize("trial", range(10))
    def test_random_guess(
        self, params: ApvcParams, rng: random.Random, trial: int
    ) -> None:
        challenger = _Challenger(params, rng)
        for _ in range(3):
            challenger.query(_vector(rng), _fresh_randomness(rng, challenger))
        x_star = _vector(rng)
        guess = rng.randrange(1, GROUP_ORDER)
        cm_star = Commitment(point_mul(guess, params.h))
        randoms = [_fresh_randomness(rng, challenger)]
        assert not challenger.wins(x_star, cm_star, randoms, [1])

    @pytest.mark.parametrize("trial", range(10))
    def test_shifted_combination(
        self, params: ApvcParams, rng: random.Random, trial: int
    ) -> None:
        challenger = _Challenger(params, rng)
        xs = [_vector(rng) for _ in range(2)]
        randoms = [_fresh_randomness(rng, challenger) for _ in xs]
        cms = [challenger.query(x, r) for x, r in zip(xs, randoms)]
        delta = [rng.randrange(1, 2**20) for _ in range(D)]
        folded = apvc_aggregate_commitments([cm for cm in cms if cm is not None])
        cm_star = Commitment(
            point_add(folded.point, multi_exp(delta, params.generators))
        )
        x_star = [a + b + dl for a, b, dl in zip(*xs, delta)]
        assert not challenger.wins(x_star, cm_star, randoms, [1, 1])

    def test_key_holder_wins(self, params: ApvcParams, rng: random.Random) -> None:
        challenger = _Challenger(params, rng)
        x = _vector(rng)
        r = _fresh_randomness(rng, challenger)
        challenger.query(x, r)
        fresh = _fresh_randomness(rng, challenger)
        x_star = _vector(rng)
        cm_star = apvc_commit(params, challenger.key, x_star, fresh)
        assert challenger.wins(x_star, cm_star, [fresh], [1])
