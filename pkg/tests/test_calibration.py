import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sall import autodiff as ad
from sall import calibration as cal
from sall.calibration import Bin, PredictionRecord, ReliabilityDiagram


def brute_force(records):
    """Loop-by-loop conf/err/accuracy oracle."""
    good, bad = [], []
    for r in records:
        p = list(r.probabilities)
        best = 0
        for k in range(1, len(p)):
            if p[k] > p[best]:
                best = k
        (good if best == r.true_class else bad).append(p[best])
    # np.mean so the summation order matches and equality can be exact
    mean = lambda xs: float(np.mean(xs)) if xs else None
    return mean(good), mean(bad), len(good) / len(records)


def calibrated_source(n, K, rng):
    """Probabilities from a Dirichlet, true class drawn from those probabilities."""
    P = rng.dirichlet(np.full(K, 0.5), size=n)
    y = np.array([rng.choice(K, p=p) for p in P])
    return cal.records_from(P, y)


class TestRecord:
    def test_validation(self):
        with pytest.raises(ValueError):
            PredictionRecord([0.5, 0.6], 0)
        with pytest.raises(ValueError):
            PredictionRecord([0.5, 0.5], 2)


class TestConfidenceError:
    def test_single_correct(self):
        assert cal.confidence_error([PredictionRecord([0.7, 0.3], 0)]) == (0.7, None, 1.0)

    def test_two_partitions(self):
        conf, err, acc = cal.confidence_error([PredictionRecord([0.6, 0.4], 0), PredictionRecord([0.8, 0.2], 1)])
        assert (conf, err, acc) == (0.6, 0.8, 0.5)

    def test_uniform_tie_break(self):
        conf, err, acc = cal.confidence_error([PredictionRecord(np.full(4, 0.25), 0)] * 5)
        assert conf == 0.25 and err is None and acc == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            cal.confidence_error([])

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            n, K = rng.integers(1, 12), rng.integers(2, 6)
            records = cal.records_from(rng.dirichlet(np.ones(K), size=n), rng.integers(0, K, size=n))
            assert cal.confidence_error(records) == brute_force(records)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        P = rng.dirichlet(np.ones(4), size=8)
        y = rng.integers(0, 4, size=8)
        perm = rng.permutation(4)
        inv = np.argsort(perm)
        a = cal.confidence_error(cal.records_from(P, y))
        b = cal.confidence_error(cal.records_from(P[:, perm], inv[y]))
        assert a == b

    def test_tempering_keeps_accuracy_lowers_conf(self, rng):
        z = rng.normal(size=(200, 5)) * 3
        y = rng.integers(0, 5, size=200)
        reports = [cal.confidence_error(cal.records_from(ad.softmax_array(z, T), y)) for T in (1, 2, 3)]
        assert reports[0][2] == reports[1][2] == reports[2][2]
        assert reports[0][0] >= reports[1][0] >= reports[2][0]


class TestReliability:
    def test_calibrated_source(self, rng):
        records = calibrated_source(50_000, 4, rng)
        diagram = cal.reliability_diagram(records, 10)
        assert diagram.total == 50_000
        for b in diagram.bins:
            if b.count >= 1000:
                assert abs(b.accuracy - b.mean_conf) < 0.02
        assert cal.ece(diagram) < 0.02

    def test_all_confident_and_correct(self):
        d = cal.reliability_diagram([PredictionRecord([1.0, 0.0], 0)] * 7, 10)
        occupied = [b for b in d.bins if b.count]
        assert len(occupied) == 1 and occupied[0].hi == 1.0 and occupied[0].accuracy == 1.0

    def test_boundary_goes_to_lower_bin_of_half_open_interval(self):
        # (lo, hi] bins: a confidence of exactly 0.6 belongs to (0.5, 0.6]
        d = cal.reliability_diagram([PredictionRecord([0.6, 0.4], 0)], 10)
        assert [b.count for b in d.bins].index(1) == 5

    def test_counts_sum(self, rng):
        records = cal.records_from(rng.dirichlet(np.ones(3), size=37), rng.integers(0, 3, size=37))
        d = cal.reliability_diagram(records, 7)
        assert d.total == 37 and len(d.bins) == 7
        assert all(0 <= b.accuracy <= 1 for b in d.bins if b.count)

    def test_too_few_bins(self):
        with pytest.raises(ValueError):
            cal.reliability_diagram([PredictionRecord([1.0, 0.0], 0)], 1)


class TestEce:
    def test_single_bin(self):
        d = ReliabilityDiagram(2, (Bin(0.0, 0.5, 0, None, None), Bin(0.5, 1.0, 10, 0.9, 0.5)))
        assert cal.ece(d) == pytest.approx(0.4)

    def test_diagonal_is_zero(self):
        d = ReliabilityDiagram(2, (Bin(0.0, 0.5, 3, 0.4, 0.4), Bin(0.5, 1.0, 10, 0.8, 0.8)))
        assert cal.ece(d) == 0.0

    def test_range(self, rng):
        for _ in range(20):
            records = cal.records_from(rng.dirichlet(np.ones(3), size=20), rng.integers(0, 3, size=20))
            assert 0 <= cal.ece(cal.reliability_diagram(records)) <= 1


class TestReport:
    def test_round_trip_and_plot(self, tmp_path, rng):
        records = calibrated_source(500, 3, rng)
        rep = cal.calibration_report(records)
        again = cal.CalibrationReport.from_dict(rep.to_dict())
        assert again.to_dict() == rep.to_dict()
        rep.save(tmp_path / "r.json")
        assert cal.plot_reliability(rep, tmp_path / "r.png").stat().st_size > 0
        assert 1 / 3 <= rep.conf <= 1 and 1 / 3 <= rep.err <= 1
