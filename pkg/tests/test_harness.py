from __future__ import annotations

import random

import numpy as np
import pytest
from conftest import ring_inputs

from eseafl.errors import BelowThreshold, ConfigurationError, ListMismatch
from eseafl.harness import (
    CSV_FIELDS,
    BenchReport,
    BenchSpec,
    expected_outbound_bytes,
    run_bench,
    run_demo,
    run_round_trip,
)
from eseafl.messages import PartyId, Role
from eseafl.protocol import Mode, ProtocolConfig, SeedSource
from eseafl.roles import AGGREGATION, SETUP


def float_inputs(n: int, d: int, seed: int = 0) -> list[np.ndarray]:
    data = np.random.default_rng(seed)
    return [data.uniform(-1, 1, d) for _ in range(n)]


class TestRoundTrip:
    def test_in_process(self) -> None:
        cfg = ProtocolConfig(n=5, k=2, d=4)
        report = run_round_trip(cfg, float_inputs(5, 4))
        assert report.matches
        assert report.result.contributor_count == 5
        assert report.rejections == 0
        assert all(report.accepted[i] == [True] for i in range(5))

    def test_offline_users(self) -> None:
        cfg = ProtocolConfig(n=6, k=2, d=3)
        report = run_round_trip(cfg, float_inputs(6, 3), offline=[1, 4])
        assert report.matches
        assert report.online == [0, 2, 3, 5]
        assert report.result.contributor_count == 4

    def test_too_many_offline(self) -> None:
        cfg = ProtocolConfig(n=6, k=2, d=3)
        with pytest.raises(BelowThreshold):
            run_round_trip(cfg, float_inputs(6, 3), offline=[0, 1, 2, 3])

    def test_quantized_inputs(self, rng: random.Random) -> None:
        cfg = ProtocolConfig(n=4, k=3, d=6)
        report = run_round_trip(cfg, ring_inputs(rng, 4, 6), quantized=True)
        assert report.matches

    def test_several_rounds(self) -> None:
        cfg = ProtocolConfig(n=4, k=2, d=3, mode=Mode.MALICIOUS, integrity=True)
        report = run_round_trip(cfg, float_inputs(4, 3), rounds=3)
        assert len(report.results) == 3
        assert report.matches
        assert all(report.accepted[i] == [True] * 3 for i in range(4))

    def test_tampering_is_rejected(self) -> None:
        cfg = ProtocolConfig(n=4, k=2, d=3, integrity=True)
        report = run_round_trip(cfg, float_inputs(4, 3), tamper=True)
        assert not report.matches
        assert all(report.accepted[i] == [False] for i in range(4))

    def test_dropped_node_is_recovered(self) -> None:
        cfg = ProtocolConfig(n=4, k=3, d=3, seed_source=SeedSource.MASTER)
        report = run_round_trip(cfg, float_inputs(4, 3), drop_nodes=[0])
        assert report.matches

    def test_lost_update(self) -> None:
        cfg = ProtocolConfig(n=4, k=2, d=3)

        def lose_update(src: PartyId, dest: PartyId, _frame: object) -> bool:
            return src == PartyId.user(0) and dest == PartyId.server()

        with pytest.raises(ListMismatch):
            run_round_trip(cfg, float_inputs(4, 3), drop=lose_update)

    def test_input_count(self) -> None:
        with pytest.raises(ConfigurationError):
            run_round_trip(ProtocolConfig(n=4, k=2, d=3), float_inputs(3, 3))

    @pytest.mark.parametrize(
        "mode, integrity", [(Mode.SEMI_HONEST, False), (Mode.MALICIOUS, True)]
    )
    def test_tcp(self, mode: Mode, integrity: bool) -> None:
        cfg = ProtocolConfig(n=4, k=2, d=3, mode=mode, integrity=integrity)
        report = run_round_trip(
            cfg, float_inputs(4, 3), transport="tcp", rounds=2, timeout=30.0
        )
        assert len(report.results) == 2
        assert report.matches
        assert all(report.accepted[i] == [True, True] for i in range(4))

    def test_tcp_refuses_recovery(self) -> None:
        cfg = ProtocolConfig(n=4, k=3, d=3, seed_source=SeedSource.MASTER)
        with pytest.raises(ConfigurationError):
            run_round_trip(cfg, float_inputs(4, 3), transport="tcp")


class TestBench:
    @pytest.fixture(scope="class")
    @classmethod
    def spec(cls) -> BenchSpec:
        return BenchSpec(n_values=(4, 8), k=2, d=16, repetitions=2)

    @pytest.fixture(scope="class")
    @classmethod
    def report(cls, spec: BenchSpec) -> BenchReport:
        return run_bench(spec)

    def test_record_count(self, report: BenchReport) -> None:
        # two values of n, two repetitions, two phases, three roles
        assert len(report.records) == 24

    def test_outbound_bytes(self, spec: BenchSpec, report: BenchReport) -> None:
        for record in report.records:
            if record.phase != AGGREGATION:
                continue
            expected = expected_outbound_bytes(
                spec.config(record.n), Role[record.role.upper()]
            )
            assert record.outbound_bytes == expected

    def test_setup_phase_is_metered(self, report: BenchReport) -> None:
        setup = [r for r in report.records if r.phase == SETUP and r.role == "user"]
        assert all(r.outbound_bytes > 0 for r in setup)

    def test_csv(self, report: BenchReport) -> None:
        lines = report.csv.splitlines()
        assert lines[0] == ",".join(CSV_FIELDS)
        assert len(lines) == 25

    def test_summary(self, report: BenchReport) -> None:
        summary = report.summary()
        assert "aggregation" in summary
        assert "mean_ms" in summary

    def test_fit(self, report: BenchReport) -> None:
        fit = report.fit("server")
        assert fit.r_squared == pytest.approx(1.0)

    def test_fit_needs_two_points(self) -> None:
        report = run_bench(BenchSpec(n_values=(3,), k=1, d=4, repetitions=1))
        with pytest.raises(ConfigurationError):
            report.fit("server")

    def test_malicious_sizes(self) -> None:
        spec = BenchSpec(
            n_values=(4,), k=2, d=8, mode=Mode.MALICIOUS, integrity=True, repetitions=1
        )
        for record in run_bench(spec).records:
            if record.phase == AGGREGATION:
                role = Role[record.role.upper()]
                assert record.outbound_bytes == expected_outbound_bytes(
                    spec.config(4), role
                )

    @pytest.mark.parametrize("kwargs", [{"repetitions": 0}, {"n_values": ()}])
    def test_invalid_spec(self, kwargs: dict[str, object]) -> None:
        with pytest.raises(ConfigurationError):
            BenchSpec(**kwargs)  # type: ignore[arg-type]

    @pytest.mark.slow
    def test_scaling_trends(self) -> None:
        spec = BenchSpec(n_values=(50, 100, 200, 400), k=3, d=1_000, repetitions=3)
        report = run_bench(spec)
        for role in ("server", "node"):
            fit = report.fit(role)
            assert fit.slope > 0
            assert fit.r_squared >= 0.9
        means = report.means()
        user = [means[(AGGREGATION, "user", n)] for n in spec.n_values]
        assert max(user) < 2 * min(user)


class TestDemo:
    def test_converges(self) -> None:
        report = run_demo(rounds=20)
        assert report.max_gap() <= 2**-14
        assert report.loss_decreasing()
        assert all(r.rejected_by == 0 for r in report.rounds)

    def test_exact(self) -> None:
        report = run_demo(n=4, d=4, rounds=5, exact=True)
        assert all(r.exact_match for r in report.rounds)

    def test_tampered_rounds_are_ignored(self) -> None:
        report = run_demo(n=4, d=4, rounds=3, tamper=True)
        assert all(r.rejected_by == 4 for r in report.rounds)
        assert not report.theta.any()

    def test_malicious(self) -> None:
        report = run_demo(n=4, d=4, rounds=4, mode=Mode.MALICIOUS, integrity=True)
        assert report.loss_decreasing(4)

    def test_table(self) -> None:
        table = run_demo(n=3, d=2, rounds=2).table()
        assert "secure-plain gap" in table
        assert table.count("yes") == 2
