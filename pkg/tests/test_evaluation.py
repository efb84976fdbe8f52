import numpy as np
import pytest

from wsopt.evaluation import (
    RocCurve,
    SingleClassError,
    auc,
    auc_pair_oracle,
    mean_ci,
    roc_curve,
    youden_threshold,
)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


class TestRocCurve:
    def test_perfect_separation_passes_through_0_1(self):
        curve = roc_curve([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
        pts = set(zip(curve.fpr.tolist(), curve.tpr.tolist()))
        assert (0.0, 1.0) in pts

    def test_all_tied_three_points(self):
        curve = roc_curve([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert len(curve.fpr) == 3
        assert curve.fpr.tolist() == [0.0, 1.0, 1.0]
        assert curve.tpr.tolist() == [0.0, 1.0, 1.0]
        assert curve.thresholds[1] == 0.5

    def test_matches_confusion_matrix_enumeration(self):
        r = rng(1)
        scores = np.round(r.uniform(size=50), 2)  # force ties
        labels = (r.uniform(size=50) < 0.4).astype(int)
        if labels.sum() in (0, 50):
            labels[0] = 1 - labels[0]
        curve = roc_curve(scores, labels)
        n_pos, n_neg = labels.sum(), (1 - labels).sum()
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            if not np.isfinite(th):
                continue
            predicted = scores >= th
            tp = np.sum(predicted & (labels == 1))
            fp = np.sum(predicted & (labels == 0))
            assert t == pytest.approx(tp / n_pos, abs=1e-12)
            assert f == pytest.approx(fp / n_neg, abs=1e-12)

    def test_single_class_raises(self):
        with pytest.raises(SingleClassError):
            roc_curve([0.1, 0.2], [1, 1])

    def test_monotone_and_endpoints_randomized(self):
        r = rng(2)
        for _ in range(50):
            n = int(r.integers(4, 60))
            scores = np.round(r.uniform(size=n), 1)
            labels = (r.uniform(size=n) < 0.5).astype(int)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            curve = roc_curve(scores, labels)  # validates in __post_init__
            assert curve.fpr[0] == 0.0 and curve.tpr[-1] == 1.0

    def test_round_trip_csv(self, tmp_path):
        curve = roc_curve([0.9, 0.5, 0.5, 0.1], [1, 1, 0, 0])
        path = tmp_path / "roc.csv"
        curve.write_csv(path)
        back = RocCurve.read_csv(path)
        assert np.allclose(back.fpr, curve.fpr)
        assert np.allclose(back.thresholds, curve.thresholds, equal_nan=True)


class TestAuc:
    def test_perfect_and_tied(self):
        assert auc(roc_curve([0.9, 0.8, 0.3], [1, 1, 0])) == 1.0
        assert auc(roc_curve([0.5, 0.5], [1, 0])) == 0.5

    def test_oracle_pairs(self):
        assert auc_pair_oracle([0.9, 0.1], [1, 0]) == 1.0
        assert auc_pair_oracle([0.5, 0.5], [1, 0]) == 0.5

    def test_trapezoid_equals_pair_oracle_500_randomized(self):
        r = rng(3)
        for k in range(500):
            n = int(r.integers(4, 120))
            # mix of heavy-tie and continuous instances
            if k % 3 == 0:
                scores = np.round(r.uniform(size=n), 1)
            elif k % 3 == 1:
                scores = r.choice([0.1, 0.4, 0.4, 0.9], size=n)
            else:
                scores = r.normal(size=n)
            labels = (r.uniform(size=n) < r.uniform(0.2, 0.8)).astype(int)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            a1 = auc(roc_curve(scores, labels))
            a2 = auc_pair_oracle(scores, labels)
            assert abs(a1 - a2) < 1e-12

    def test_label_swap_flips_auc(self):
        r = rng(4)
        scores = r.normal(size=40)
        labels = (r.uniform(size=40) < 0.5).astype(int)
        labels[0], labels[1] = 0, 1
        a = auc(roc_curve(scores, labels))
        b = auc(roc_curve(scores, 1 - labels))
        assert a + b == pytest.approx(1.0, abs=1e-12)

    def test_joint_permutation_invariance(self):
        r = rng(5)
        scores = r.normal(size=30)
        labels = (r.uniform(size=30) < 0.5).astype(int)
        labels[:2] = [0, 1]
        perm = r.permutation(30)
        assert auc(roc_curve(scores, labels)) == pytest.approx(
            auc(roc_curve(scores[perm], labels[perm])), abs=1e-15
        )


class TestYouden:
    def test_perfect_separation_tie_break(self):
        curve = roc_curve([0.9, 0.85, 0.8, 0.3, 0.2], [1, 1, 1, 0, 0])
        assert youden_threshold(curve) == 0.8

    def test_all_tied_returns_group_threshold(self):
        curve = roc_curve([0.5, 0.5], [1, 0])
        assert youden_threshold(curve) == 0.5

    def test_matches_exhaustive_scan(self):
        r = rng(6)
        for _ in range(50):
            n = int(r.integers(6, 80))
            scores = np.round(r.normal(size=n), 1)
            labels = (r.uniform(size=n) < 0.5).astype(int)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            curve = roc_curve(scores, labels)
            got = youden_threshold(curve)
            finite = np.isfinite(curve.thresholds)
            js = curve.tpr[finite] - curve.fpr[finite]
            best = js.max()
            candidates = curve.thresholds[finite][js == best]
            assert got == candidates.max()


class TestMeanCi:
    def test_zero_variance(self):
        assert mean_ci([0.8] * 7) == (0.8, 0.8, 0.8)

    def test_n2_hand_computation(self):
        mean, lo, hi = mean_ci([0.0, 1.0])
        assert mean == 0.5
        # t_{1, 0.975} * s / sqrt(2) = 12.706 * 0.7071 / 1.4142 = 6.353
        assert hi - mean == pytest.approx(6.353, abs=1e-3)
        assert mean - lo == pytest.approx(6.353, abs=1e-3)

    def test_n7_published_t6(self):
        r = rng(7)
        vals = r.normal(0.8, 0.05, size=7)
        mean, lo, hi = mean_ci(vals)
        s = np.std(vals, ddof=1)
        expect_half = 2.447 * s / np.sqrt(7)
        assert hi - mean == pytest.approx(expect_half, rel=1e-6)

    def test_scipy_path_large_n(self):
        r = rng(8)
        vals = r.normal(0.5, 0.1, size=40)
        mean, lo, hi = mean_ci(vals)
        from scipy import stats

        t = stats.t.ppf(0.975, 39)
        assert hi - mean == pytest.approx(t * np.std(vals, ddof=1) / np.sqrt(40), rel=1e-9)

    def test_n1_rejected(self):
        with pytest.raises(ValueError):
            mean_ci([0.5])
