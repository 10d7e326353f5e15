"""RMSE / nRMSE / weighted nRMSE, win ratios, cluster rollups."""

from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cargocast.data import ClusterBand, ClusterLabel, DemandRecord, ODKey
from cargocast.errors import CargocastError
from cargocast.metrics import (
    SeriesPair,
    cluster_report,
    ml_vs_baseline_winrate,
    nrmse,
    rmse,
    weighted_nrmse,
    win_ratios,
    winner,
    wnrmse,
)

A = ODKey("AAA", "BBB")
B = ODKey("BBB", "CCC")
C = ODKey("CCC", "DDD")
D = ODKey("DDD", "EEE")


def pair(od, actual, predicted):
    return SeriesPair(od=od, actual=np.array(actual, float), predicted=np.array(predicted, float))


class TestRmse:
    def test_perfect(self):
        assert rmse(pair(A, [2, 4], [2, 4])) == 0.0

    def test_hand_value(self):
        # errors (-2, 2): sqrt((4+4)/2) = 2
        assert rmse(pair(A, [1, 3], [3, 1])) == pytest.approx(2.0, abs=1e-12)

    def test_constant_offset(self):
        assert rmse(pair(A, [5, 5, 5], [8, 8, 8])) == pytest.approx(3.0, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(CargocastError):
            pair(A, [1, 2], [1])


class TestNrmse:
    def test_hand_value(self):
        # rmse 2 over mean 2 -> 1.0
        assert nrmse(pair(A, [1, 3], [3, 1])) == pytest.approx(1.0, abs=1e-12)

    def test_perfect(self):
        assert nrmse(pair(A, [1, 3], [1, 3])) == 0.0

    def test_zero_mean_excluded(self):
        assert nrmse(pair(A, [0, 0], [1, 1])) is None

    @given(st.floats(min_value=0.01, max_value=1e6))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance(self, c):
        base = pair(A, [1, 3, 2], [2, 1, 3])
        scaled = pair(A, [c * 1, c * 3, c * 2], [c * 2, c * 1, c * 3])
        assert nrmse(scaled) == pytest.approx(nrmse(base), rel=1e-9)


class TestWnrmse:
    def test_hand_two_od(self):
        # weight shares 10/40 and 30/40; 0.25*1.0 + 0.75*0.5 = 0.625
        pairs = [
            pair(A, [5, 5], [10, 10]),  # mean 5, rmse 5 -> nrmse 1.0, weight 10
            pair(B, [15, 15], [7.5, 7.5]),  # mean 15, rmse 7.5 -> nrmse 0.5, weight 30
        ]
        assert wnrmse(pairs) == pytest.approx(0.625, abs=1e-12)

    def test_single_od(self):
        p = pair(A, [1, 3], [3, 1])
        assert wnrmse([p]) == nrmse(p)

    def test_equal_weights_symmetry(self):
        pairs = [pair(A, [2, 2], [3, 3]), pair(B, [2, 2], [1, 1])]
        x, y = nrmse(pairs[0]), nrmse(pairs[1])
        assert wnrmse(pairs) == pytest.approx((x + y) / 2, abs=1e-12)

    def test_zero_mean_renormalized(self):
        pairs = [pair(A, [0, 0], [1, 1]), pair(B, [2, 2], [3, 3])]
        assert wnrmse(pairs) == nrmse(pairs[1])

    def test_all_excluded_errors(self):
        with pytest.raises(CargocastError):
            wnrmse([pair(A, [0, 0], [1, 1])])

    @given(
        st.lists(
            st.tuples(
                st.floats(min_value=0.1, max_value=100),  # mean level
                st.floats(min_value=0.0, max_value=50),  # error offset
            ),
            min_size=1,
            max_size=6,
        )
    )
    @settings(max_examples=40, deadline=None)
    def test_convex_combination_bounds(self, rows):
        pairs = [
            pair(ODKey("AAA", "BBB"), [lvl, lvl], [lvl + off, lvl + off])
            for lvl, off in rows
        ]
        values = [nrmse(p) for p in pairs]
        got = wnrmse(pairs)
        assert min(values) - 1e-12 <= got <= max(values) + 1e-12


class TestWinRatios:
    def test_sweep(self):
        table = {A: {"m1": 0.5, "m2": 0.7}, B: {"m1": 0.1, "m2": 0.2}}
        ratios = win_ratios(table, ["m1", "m2"])
        assert ratios == {"m1": 1.0, "m2": 0.0}

    def test_counting(self):
        table = {
            A: {"m1": 0.1, "m2": 0.5},
            B: {"m1": 0.1, "m2": 0.5},
            C: {"m1": 0.1, "m2": 0.5},
            D: {"m1": 0.5, "m2": 0.1},
        }
        ratios = win_ratios(table, ["m1", "m2"])
        assert ratios == {"m1": 0.75, "m2": 0.25}

    def test_tie_goes_to_priority(self):
        table = {A: {"m1": 0.4, "m2": 0.4}}
        assert winner(table[A], ["m2", "m1"]) == "m2"
        assert winner(table[A], ["m1", "m2"]) == "m1"

    def test_restricted_set(self):
        table = {A: {"m1": 0.1, "m2": 0.5}, B: {"m1": 0.5, "m2": 0.1}}
        ratios = win_ratios(table, ["m1", "m2"], ods={B})
        assert ratios == {"m1": 0.0, "m2": 1.0}

    @given(st.lists(st.tuples(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 10)), min_size=1, max_size=20))
    @settings(max_examples=40, deadline=None)
    def test_distribution(self, rows):
        ods = [ODKey("AAA", "BBB"), ODKey("AAB", "BBA")]
        table = {}
        for i, (x, y, z) in enumerate(rows):
            od = ODKey("AAA", f"B{chr(ord('A') + i % 26)}{chr(ord('A') + i // 26)}")
            table[od] = {"m1": x, "m2": y, "m3": z}
        ratios = win_ratios(table, ["m1", "m2", "m3"])
        assert abs(sum(ratios.values()) - 1.0) <= 1e-9
        assert all(v >= 0 for v in ratios.values())

    def test_argmin_invariant_rmse_vs_nrmse(self):
        # same positive per-OD normalizer cannot change the winner
        rng = np.random.default_rng(0)
        for _ in range(50):
            losses = dict(zip("abcd", rng.uniform(0.1, 5.0, size=4)))
            norm = rng.uniform(0.5, 20.0)
            scaled = {k: v / norm for k, v in losses.items()}
            assert winner(losses, "abcd") == winner(scaled, "abcd")


class TestMlVsBaseline:
    table = {
        A: {"ml": 0.1, "stat": 0.5},
        B: {"ml": 0.5, "stat": 0.1},
        C: {"ml": 0.2, "stat": 0.9},
        D: {"ml": 0.4, "stat": 0.4},
    }

    def test_hand_half(self):
        got = ml_vs_baseline_winrate(self.table, {"ml"}, {"stat"}, {A, B, C, D})
        assert got == 0.5  # A and C win; D ties -> baseline

    def test_ml_always_better(self):
        table = {A: {"ml": 0.1, "stat": 0.2}, B: {"ml": 0.1, "stat": 0.3}}
        assert ml_vs_baseline_winrate(table, {"ml"}, {"stat"}, {A, B}) == 1.0

    def test_identical_losses_tie_rule(self):
        table = {A: {"ml": 0.3, "stat": 0.3}}
        assert ml_vs_baseline_winrate(table, {"ml"}, {"stat"}, {A}) == 0.0


LABELS = {
    A: ClusterLabel(ClusterBand.TOP100, True),
    B: ClusterLabel(ClusterBand.TOP100, True),
    C: ClusterLabel(ClusterBand.R101_500, False),
}


class TestClusterReport:
    def test_single_cluster_matches_global(self):
        nr = {A: 1.0, B: 0.5}
        w = {A: 10.0, B: 30.0}
        labels = {k: ClusterLabel(ClusterBand.TOP100, True) for k in nr}
        rows = cluster_report(nr, w, labels, revenue_by_od={A: 1.0, B: 1.0})
        top = next(r for r in rows if r.name == "Top 100")
        assert top.wnrmse == pytest.approx(weighted_nrmse(nr, w), abs=1e-12)
        assert top.wnrmse == pytest.approx(0.625, abs=1e-12)

    def test_hand_fixture_two_clusters(self):
        # Top100: nrmse (1.0, 0.5) weights (10, 30) -> mean 0.75, wnrmse 0.625
        # 101-500: single od nrmse 2.0 -> mean = wnrmse = 2.0
        nr = {A: 1.0, B: 0.5, C: 2.0}
        w = {A: 10.0, B: 30.0, C: 5.0}
        revenue = {A: 50.0, B: 30.0, C: 20.0}
        rows = {r.name: r for r in cluster_report(nr, w, LABELS, revenue)}
        assert rows["Top 100"].mean_nrmse == pytest.approx(0.75, abs=1e-12)
        assert rows["Top 100"].wnrmse == pytest.approx(0.625, abs=1e-12)
        assert rows["Top 100"].revenue_share == pytest.approx(0.8, abs=1e-12)
        assert rows["101-500"].mean_nrmse == pytest.approx(2.0, abs=1e-12)
        assert rows["101-500"].wnrmse == pytest.approx(2.0, abs=1e-12)
        assert rows["Significant cluster"].sample_size == 2

    def test_band_revenue_shares_partition(self):
        nr = {A: 1.0, B: 0.5, C: 2.0}
        w = {A: 10.0, B: 30.0, C: 5.0}
        revenue = {A: 50.0, B: 30.0, C: 20.0}
        rows = cluster_report(nr, w, LABELS, revenue)
        band_rows = [r for r in rows if r.name != "Significant cluster"]
        assert abs(sum(r.revenue_share for r in band_rows) - 1.0) <= 1e-9

    def test_row_order(self):
        nr = {A: 1.0}
        rows = cluster_report(nr, {A: 1.0}, LABELS, {A: 1.0, B: 1.0, C: 1.0})
        assert [r.name for r in rows] == [
            "Significant cluster", "Top 100", "101-500", "501-1000", "Above 1001",
        ]
