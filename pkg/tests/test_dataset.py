import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stockrank.dataset import (
    LABEL_NAMES,
    SplitPlan,
    assign_label,
    build_split_plans,
    cap_return,
    daily_return,
    make_samples,
    return_matrix,
    standardize,
)
from stockrank.errors import DataError
from stockrank.indicators import assemble_panel
from stockrank.market_data import apply_dead_stock_rule

from conftest import make_series, make_universe, random_walk_universe


class TestSplitPlans:
    def test_first_plan_layout(self):
        plans = build_split_plans(1782, m=20)
        assert plans[0].std_range == (0, 200)
        assert plans[0].trainval_range == (200, 400)
        assert plans[0].test_range == (400, 420)

    def test_plans_shift_by_twenty(self):
        plans = build_split_plans(1782, m=20)
        for prev, cur in zip(plans, plans[1:]):
            assert cur.std_range[0] - prev.std_range[0] == 20
            assert cur.trainval_range[0] - prev.trainval_range[0] == 20
            assert cur.test_range[0] - prev.test_range[0] == 20

    def test_five_year_panel_produces_67_periods(self):
        # 400 lead-in days + 67 periods * 20 test days + 2 label days
        assert len(build_split_plans(1742, m=20)) == 67

    def test_too_short_calendar(self):
        with pytest.raises(DataError, match="at least"):
            build_split_plans(421, m=20)

    def test_last_plan_leaves_room_for_labels(self):
        plans = build_split_plans(1782, m=20)
        last = plans[-1]
        assert last.test_range[1] - 1 + 2 < 1782

    def test_offset_shifts_everything(self):
        plans = build_split_plans(500, m=20, offset=50)
        assert plans[0].std_range == (50, 250)
        assert plans[0].test_range == (450, 470)

    def test_contiguity_enforced(self):
        with pytest.raises(DataError, match="contiguous"):
            SplitPlan(0, (0, 200), (201, 401), (401, 421))


def flat_panel(universe, with_specs=False):
    return assemble_panel(universe, basic=True, specs=[])


class TestStandardize:
    def _panel_and_plan(self, rng, n_stocks=3, n_days=500):
        u = random_walk_universe(rng, n_stocks, n_days)
        panel = flat_panel(u)
        plans = build_split_plans(n_days, m=20, offset=panel.first_all_valid_day)
        return u, panel, plans[0]

    def test_constant_feature_maps_to_zero(self):
        u = make_universe({"AAA": [5.0] * 500}, volumes={"AAA": [1000] * 500})
        panel = flat_panel(u)
        plan = build_split_plans(500, m=20, offset=panel.first_all_valid_day)[0]
        scaled, stats = standardize(panel, plan)
        col = panel.feature_names.index("dollar_volume")
        # constant 5.0 * 1000 everywhere: sigma 0, value - mean = 0
        np.testing.assert_allclose(scaled[0, :, col], 0.0, atol=1e-15)

    def test_hand_arithmetic(self, rng):
        u, panel, plan = self._panel_and_plan(rng)
        scaled, stats = standardize(panel, plan)
        si, fj = 1, 3
        raw = panel.values[si, plan.trainval_range[0], fj]
        mu = stats.mean[si, fj]
        sd = stats.std[si, fj]
        expected = (raw - mu) / max(sd, 1e-8)
        got = scaled[si, plan.trainval_range[0] - plan.std_range[0], fj]
        assert got == pytest.approx(expected, rel=1e-12)
        assert (14.0 - 10.0) / 2.0 == 2.0  # the documented example shape

    def test_zero_sigma_large_finite(self):
        # constant over the std range, different later: epsilon guard kicks in
        opens = [5.0] * 260 + [6.0] * 240
        u = make_universe({"AAA": opens}, volumes={"AAA": [1000] * 500})
        panel = flat_panel(u)
        plan = build_split_plans(500, m=20, offset=panel.first_all_valid_day)[0]
        scaled, stats = standardize(panel, plan)
        col = panel.feature_names.index("dollar_volume")
        sd = stats.std[0, col]
        assert sd == 0.0
        late = scaled[0, -1, col]
        assert np.isfinite(late)
        assert late == pytest.approx((6000.0 - 5000.0) / 1e-8, rel=1e-9)

    def test_std_range_self_standardizes(self, rng):
        u, panel, plan = self._panel_and_plan(rng)
        scaled, stats = standardize(panel, plan)
        s0, s1 = plan.std_range
        base = scaled[:, : s1 - s0, :]
        mask = stats.std > 1e-8
        mu = base.mean(axis=1)[mask]
        sd = base.std(axis=1)[mask]
        np.testing.assert_allclose(mu, 0.0, atol=1e-9)
        np.testing.assert_allclose(sd, 1.0, atol=1e-9)

    def test_same_stats_for_train_and_test(self, rng):
        u, panel, plan = self._panel_and_plan(rng)
        scaled, stats = standardize(panel, plan)
        d = plan.test_range[0]
        raw = panel.values[0, d, 0]
        got = scaled[0, d - plan.std_range[0], 0]
        assert got == pytest.approx(
            (raw - stats.mean[0, 0]) / max(stats.std[0, 0], 1e-8), rel=1e-12
        )


class TestDailyReturn:
    def test_three_percent(self):
        s = make_series("AAA", [90.0, 100.0, 103.0, 104.0])
        assert daily_return(s, 0) == pytest.approx(0.03, abs=1e-15)

    def test_no_change(self):
        s = make_series("AAA", [90.0, 100.0, 100.0])
        assert daily_return(s, 0) == 0.0

    def test_dead_stock_returns_zero(self):
        u = make_universe({"AAA": [5.0, 0.05, 8.0, 9.0]})
        u = apply_dead_stock_rule(u, 0.1)
        s = u.stocks[0]
        # death on day 1; the return depending on day 2 >= death is zeroed
        assert daily_return(s, 0) == 0.0

    def test_return_before_death_recorded_as_usual(self):
        opens = [10.0, 11.0, 12.0, 13.0, 0.05, 0.04, 0.03]
        u = apply_dead_stock_rule(make_universe({"AAA": opens}), 0.1)
        s = u.stocks[0]
        assert s.death_index(u.calendar) == 4
        assert daily_return(s, 0) == pytest.approx(12.0 / 11.0 - 1.0)
        assert daily_return(s, 1) == pytest.approx(13.0 / 12.0 - 1.0)
        assert daily_return(s, 2) == 0.0  # needs day 4 = death day
        assert daily_return(s, 4) == 0.0

    def test_out_of_range(self):
        s = make_series("AAA", [10.0, 10.0, 10.0])
        with pytest.raises(DataError):
            daily_return(s, 1)

    def test_return_matrix_agrees_with_scalar_op(self, rng):
        u = apply_dead_stock_rule(random_walk_universe(rng, 4, 30), 0.1)
        mat = return_matrix(u)
        for si, s in enumerate(u.stocks):
            for T in range(u.n_days - 2):
                assert mat[si, T] == daily_return(s, T)


class TestLabels:
    @pytest.mark.parametrize(
        "r,expected",
        [
            (0.05, "strong_buy"),
            (0.03, "strong_buy"),
            (0.02, "buy"),
            (0.01, "hold"),  # inclusive upper bound
            (0.0, "hold"),
            (-0.01, "sell"),
            (-0.02, "sell"),
            (-0.03, "strong_sell"),  # inclusive
            (-0.08, "strong_sell"),
        ],
    )
    def test_boundaries(self, r, expected):
        label = assign_label(r)
        assert LABEL_NAMES[int(np.argmax(label))] == expected
        assert label.sum() == 1.0

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            assign_label(float("nan"))

    @settings(max_examples=300, deadline=None)
    @given(st.one_of(
        st.floats(min_value=-1.0, max_value=1.0, allow_nan=False),
        st.sampled_from([0.01, -0.01, 0.03, -0.03, 1e-9, -1e-9]),
    ))
    def test_partition_of_reals(self, r):
        label = assign_label(r)
        assert label.shape == (5,)
        assert np.count_nonzero(label) == 1

    def test_symmetric_returns_symmetric_labels(self, rng):
        r = rng.normal(0, 0.02, size=200_000)
        r = np.concatenate([r, -r])  # exactly symmetric
        idx = np.array([int(np.argmax(assign_label(x))) for x in r[:5000]])
        buys = np.sum(idx == 3)
        sells = np.sum(idx == 1)
        strong_b = np.sum(idx == 4)
        strong_s = np.sum(idx == 0)
        assert abs(buys - sells) < 4 * np.sqrt(buys + sells + 1)
        assert abs(strong_b - strong_s) < 4 * np.sqrt(strong_b + strong_s + 1)


class TestCapReturn:
    def test_below_cutoff(self):
        assert cap_return(0.03) == 0.03

    def test_positive_cap(self):
        assert cap_return(0.7) == 0.5

    def test_negative_cap(self):
        # |r_cap| of the piecewise capped return: min(|r|, 0.5)
        assert cap_return(-0.8) == 0.5

    @settings(max_examples=200, deadline=None)
    @given(st.floats(min_value=-5, max_value=5, allow_nan=False))
    def test_zero_weight_iff_zero_return(self, r):
        w = cap_return(r)
        assert 0.0 <= w <= 0.5
        assert (w == 0.0) == (r == 0.0)


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(77)
    u = apply_dead_stock_rule(random_walk_universe(rng, 10, 500), 0.1)
    panel = flat_panel(u)
    plan = build_split_plans(500, m=20, offset=panel.first_all_valid_day)[0]
    return u, panel, plan


class TestMakeSamples:
    def test_counts(self, setup):
        u, panel, plan = setup
        out = make_samples(panel, u, plan, m=20)
        assert len(out["train"]) == 1800
        assert len(out["val"]) == 200
        assert len(out["test"]) == 200

    def test_first_anchor_window_reaches_into_std_range(self, setup):
        u, panel, plan = setup
        out = make_samples(panel, u, plan, m=20)
        first = min(range(len(out["train"])), key=lambda i: out["train"].anchor_days[i])
        sample = out["train"][first]
        assert sample.anchor_day == plan.trainval_range[0]
        scaled, _ = standardize(panel, plan)
        si = u.tickers.index(sample.ticker)
        lo = sample.anchor_day - 19 - plan.std_range[0]
        np.testing.assert_array_equal(sample.window, scaled[si, lo : lo + 20, :])

    def test_sample_consistency(self, setup):
        u, panel, plan = setup
        out = make_samples(panel, u, plan, m=20)
        s = out["test"][7]
        si = u.tickers.index(s.ticker)
        expected_r = daily_return(u.stocks[si], s.anchor_day)
        assert s.r_d == expected_r
        assert s.weight == cap_return(expected_r)
        np.testing.assert_array_equal(s.label, assign_label(expected_r))
        assert s.sector_id == u.stocks[si].sector_id
        assert s.window.shape == (20, panel.n_features)

    def test_no_lookahead_beyond_label_horizon(self, setup):
        u, panel, plan = setup
        out = make_samples(panel, u, plan, m=20)
        horizon = plan.test_range[1] + 1  # last day any sample may read
        # perturb all opens strictly after the horizon and rebuild
        opens = {s.ticker: s.opens() for s in u.stocks}
        for t in opens:
            opens[t][horizon + 1 :] *= 1.5
        u2 = make_universe(opens, calendar=u.calendar)
        u2 = apply_dead_stock_rule(u2, 0.1)
        panel2 = flat_panel(u2)
        out2 = make_samples(panel2, u2, plan, m=20)
        for split in ("train", "val", "test"):
            np.testing.assert_array_equal(out[split].windows, out2[split].windows)
            np.testing.assert_array_equal(out[split].returns, out2[split].returns)
            np.testing.assert_array_equal(out[split].labels, out2[split].labels)

    def test_dead_stock_samples_zero_weight(self):
        opens = {"AAA": np.full(500, 5.0), "BBB": np.full(500, 7.0)}
        opens["AAA"][300:] = 0.05  # dies inside the trainval range
        u = apply_dead_stock_rule(make_universe(opens), 0.1)
        panel = flat_panel(u)
        plan = build_split_plans(500, m=20, offset=panel.first_all_valid_day)[0]
        out = make_samples(panel, u, plan, m=20)
        for split in ("train", "val", "test"):
            ss = out[split]
            for i in range(len(ss)):
                if ss.tickers[i] == "AAA" and ss.anchor_days[i] >= 298:
                    assert ss.weights[i] == 0.0
                    assert ss.returns[i] == 0.0
