import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from purs.errors import MetricError
from purs.metrics import MetricsReport, auc, coverage, format_table, hr_at_10, hr_at_k, mean_unexpectedness
from purs.unexpectedness import InterestCluster, unexpectedness


def pairwise_auc(scores, labels):
    """Brute force over every positive-negative pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


class TestAuc:
    def test_perfect(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_reversed(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_ties_count_half(self):
        assert auc([0.9, 0.5, 0.5, 0.1], [1, 0, 1, 0]) == 0.875

    def test_one_class(self):
        with pytest.raises(MetricError):
            auc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            auc([0.1, 0.2], [1, 0, 1])

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 40))
            s = np.round(rng.normal(size=n), int(rng.integers(0, 3)))  # rounding creates ties
            y = rng.integers(0, 2, n)
            y[0], y[1] = 0, 1
            assert abs(auc(s, y) - pairwise_auc(s, y)) < 1e-12

    @given(st.lists(st.integers(-50, 50), min_size=4, max_size=30), st.integers(0, 10_000))
    def test_invariant_under_increasing_transform(self, scores, seed):
        y = np.random.default_rng(seed).integers(0, 2, len(scores))
        y[0], y[1] = 0, 1
        s = np.array(scores, dtype=float) / 10
        assert auc(s, y) == auc(np.exp(s) * 3 + 1, y) == auc(s ** 3 + s, y)


class TestHr:
    def test_always_first(self):
        assert hr_at_10([["a"] + list("bcdefghijk")] * 3, ["a"] * 3) == 1.0

    def test_rank_fifty(self):
        ranked = [f"n{k}" for k in range(49)] + ["hit"] + [f"m{k}" for k in range(50)]
        assert hr_at_10([ranked], ["hit"]) == 0.0

    def test_rank_ten_is_hit(self):
        ranked = [f"n{k}" for k in range(9)] + ["hit"] + [f"m{k}" for k in range(90)]
        assert hr_at_10([ranked], ["hit"]) == 1.0
        assert hr_at_k([ranked], ["hit"], 9) == 0.0

    def test_missing_target_skipped(self):
        assert hr_at_10([["a"], ["b"]], ["a", None]) == 1.0
        assert hr_at_10([["a"]], [None]) == 0.0


class TestCoverage:
    def test_full(self):
        assert coverage([["a", "b"], ["c"]], ["a", "b", "c"]) == 1.0

    def test_one_item(self):
        assert coverage([["x"]] * 5, [c for c in "xabcdefghi"]) == pytest.approx(0.1)

    def test_empty_lists(self):
        assert coverage([[], []], ["a"]) == 0.0

    def test_empty_catalog(self):
        with pytest.raises(MetricError):
            coverage([["a"]], [])

    @given(st.lists(st.permutations(list(range(12))), min_size=1, max_size=6))
    def test_monotone_in_k(self, rankings):
        cov = [coverage([r[:k] for r in rankings], range(20)) for k in range(13)]
        assert all(a <= b for a, b in zip(cov, cov[1:]))


class TestMeanUnexpectedness:
    def test_at_centroids(self):
        cl = {"u": [InterestCluster(np.zeros(2), 1, [0])]}
        assert mean_unexpectedness({"u": ["i"]}, cl, {"i": np.zeros(2)}) == 0.0

    def test_hand_mean(self):
        cl = {"u": [InterestCluster(np.zeros(2), 2, [0, 1])]}
        emb = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 3.0])}
        assert mean_unexpectedness({"u": ["a", "b"]}, cl, emb) == pytest.approx(2.0)

    def test_matches_module_average(self, rng):
        emb = {k: rng.normal(size=3) for k in "abcde"}
        sizes = {"x": [1, 3], "y": [2, 2]}
        cl = {u: [InterestCluster(rng.normal(size=3), n, list(range(n))) for n in sizes[u]] for u in sizes}
        rec = {"x": ["a", "b"], "y": ["c", "d", "e"]}
        expect = np.mean([unexpectedness(emb[i], cl[u]) for u in rec for i in rec[u]])
        assert mean_unexpectedness(rec, cl, emb) == pytest.approx(expect, abs=1e-14)

    def test_cold_user_counts_zero(self):
        assert mean_unexpectedness({"u": ["a"]}, {}, {"a": np.ones(2)}) == 0.0


class TestReport:
    def test_ranges(self):
        with pytest.raises(MetricError):
            MetricsReport(1.2, 0.5, 0.1, 0.2, 1, 1)
        with pytest.raises(MetricError):
            MetricsReport(0.5, 0.5, -0.1, 0.2, 1, 1)

    def test_json_round_trip(self):
        r = MetricsReport(0.75, 0.25, 0.31, 0.05, 10, 100, variant="FULL")
        assert MetricsReport.from_dict(json.loads(r.to_json())) == r

    def test_table(self):
        rows = [MetricsReport(0.75, 0.25, 0.31, 0.05, 10, 100, variant="FULL"),
                MetricsReport(0.7, 0.2, 0.1, 0.02, 10, 100, variant="V4_NO_UNEXP")]
        lines = format_table(rows).splitlines()
        assert len(lines) == 3
        assert lines[0].split() == ["Model", "AUC", "HR@10", "Unexp", "Coverage"]
        assert lines[1].split() == ["FULL", "0.7500", "0.2500", "0.3100", "0.0500"]
        assert len({len(x) for x in lines}) == 1
