import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrlport.market_data import (
    MarketDataError,
    daily_return_vector,
    default_asset_manifest,
    fluctuation_tensor,
    load_prices,
    moment_estimates,
    return_window,
)

from conftest import make_series, random_walk_series

LOG2_1P1 = math.log2(1.1)  # 0.13750352374993502


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadPrices:
    def test_well_formed(self, tmp_path):
        p = write_csv(tmp_path / "p.csv",
                      "date,AA,BB\n2020-01-01,10,20\n2020-01-02,11,21\n2020-01-03,12,22\n")
        series = load_prices(p, ["AA", "BB"])
        assert series.tickers == ("AA", "BB")
        assert series.prices.shape == (3, 2)
        assert series.prices[1, 1] == 21.0

    def test_gap_asset_dropped(self, tmp_path):
        p = write_csv(tmp_path / "p.csv",
                      "date,AA,BB\n2020-01-01,10,20\n2020-01-02,11,\n2020-01-03,12,22\n")
        series = load_prices(p)
        assert series.tickers == ("AA",)

    def test_gap_asset_required_fails(self, tmp_path):
        p = write_csv(tmp_path / "p.csv",
                      "date,AA,BB\n2020-01-01,10,20\n2020-01-02,11,\n2020-01-03,12,22\n")
        with pytest.raises(MarketDataError, match="missing data"):
            load_prices(p, ["AA", "BB"])

    def test_unordered_dates_sorted(self, tmp_path):
        rows = [("2020-01-03", 12.0), ("2020-01-01", 10.0), ("2020-01-02", 11.0)]
        body = "".join(f"{d},{v}\n" for d, v in rows)
        p = write_csv(tmp_path / "p.csv", "date,AA\n" + body)
        series = load_prices(p)
        expected = sorted(rows)  # sort oracle on the raw rows
        assert [str(d) for d in series.calendar] == [d for d, _ in expected]
        assert series.prices[:, 0].tolist() == [v for _, v in expected]

    def test_missing_file(self, tmp_path):
        with pytest.raises(MarketDataError, match="not found"):
            load_prices(tmp_path / "absent.csv")

    def test_unparseable_cell(self, tmp_path):
        p = write_csv(tmp_path / "p.csv", "date,AA\n2020-01-01,ten\n2020-01-02,11\n")
        with pytest.raises(MarketDataError, match="unparseable"):
            load_prices(p)

    def test_absent_required_column(self, tmp_path):
        p = write_csv(tmp_path / "p.csv", "date,AA\n2020-01-01,10\n")
        with pytest.raises(MarketDataError, match="absent"):
            load_prices(p, ["ZZ"])

    def test_non_positive_price(self, tmp_path):
        p = write_csv(tmp_path / "p.csv", "date,AA\n2020-01-01,10\n2020-01-02,-1\n")
        with pytest.raises(MarketDataError, match="non-positive"):
            load_prices(p)

    def test_default_manifest_has_29_assets(self):
        manifest = default_asset_manifest()
        assert len(manifest) == 29
        assert manifest[0] == "MMM" and "AAPL" in manifest


class TestDailyReturnVector:
    def test_constant_prices_zero(self):
        series = make_series(np.full((11, 2), 50.0))
        assert daily_return_vector(series, 1, 3, 5).tolist() == [0.0, 0.0]

    def test_doubling_price_is_one(self):
        series = make_series([[10.0], [20.0]])
        assert daily_return_vector(series, 1, 1, 1)[0] == 1.0

    def test_scalar_log_value(self):
        series = make_series([[10.0], [11.0]])
        assert daily_return_vector(series, 1, 1, 1)[0] == pytest.approx(LOG2_1P1, rel=1e-12)

    def test_k1_uses_previous_period_close(self):
        series = make_series([[10.0], [10.0], [20.0], [20.0], [40.0], [40.0]])
        # K=2: period 2 day 1 ratio is row3/row2
        assert daily_return_vector(series, 2, 1, 2)[0] == 0.0
        assert daily_return_vector(series, 2, 2, 2)[0] == 1.0

    def test_out_of_range(self):
        series = make_series(np.full((4, 1), 5.0))
        with pytest.raises(MarketDataError):
            daily_return_vector(series, 2, 2, 3)
        with pytest.raises(MarketDataError):
            daily_return_vector(series, 1, 4, 3)

    @given(p_prev=st.floats(0.5, 500.0), ratio=st.floats(0.5, 2.0))
    def test_exp2_roundtrip(self, p_prev, ratio):
        series = make_series([[p_prev], [p_prev * ratio]])
        z = daily_return_vector(series, 1, 1, 1)[0]
        assert 2.0 ** z * p_prev == pytest.approx(p_prev * ratio, rel=1e-10)


class TestFluctuationTensor:
    def test_constant_prices_zero_matrix(self):
        series = make_series(np.full((6, 3), 7.0))
        tensor = fluctuation_tensor(series, 1, 5)
        assert tensor.values.shape == (5, 3)
        assert not tensor.values.any()

    def test_k1_degenerates_to_single_vector(self):
        series = make_series([[10.0], [11.0]])
        tensor = fluctuation_tensor(series, 1, 1)
        np.testing.assert_array_equal(tensor.values[0],
                                      daily_return_vector(series, 1, 1, 1))

    def test_matches_elementwise_oracle(self, rng):
        series = random_walk_series(rng, 6, 2)
        tensor = fluctuation_tensor(series, 1, 5)
        for k in range(1, 6):
            for i in range(2):
                expected = math.log2(series.prices[k, i] / series.prices[k - 1, i])
                assert tensor.values[k - 1, i] == pytest.approx(expected, rel=1e-12)

    def test_insufficient_history(self):
        series = make_series(np.full((5, 1), 3.0))
        with pytest.raises(MarketDataError):
            fluctuation_tensor(series, 2, 5)


class TestMomentEstimates:
    def test_constant_returns(self):
        # Price doubles daily: every z = 1, covariance all zero.
        series = make_series(2.0 ** np.arange(11.0))
        m = moment_estimates(series, 2, 2, 5)
        assert m.mean[0] == 1.0
        assert m.covariance[0, 0] == 0.0

    def test_printed_denominator_hand_case(self):
        # n=1, K=5, M=2, pooled z alternating +1/-1: var = 10 / (10-1-1).
        logp = np.cumsum([0] + [1, -1] * 5)
        series = make_series(np.exp2(logp.astype(np.float64)))
        m = moment_estimates(series, 2, 2, 5)
        assert m.covariance[0, 0] == pytest.approx(1.25, abs=1e-12)

    def test_mean_uses_current_period_only(self):
        # Period 1 returns all zero, period 2 returns all one.
        logp = np.concatenate([np.zeros(6), np.arange(1.0, 6.0)])
        series = make_series(np.exp2(logp))
        m = moment_estimates(series, 2, 2, 5)
        assert m.mean[0] == 1.0

    def test_two_pass_oracle(self, rng):
        series = random_walk_series(rng, 11, 2)
        K, M, n = 5, 2, 2
        m = moment_estimates(series, 2, M, K)
        z = np.vstack([fluctuation_tensor(series, t, K).values for t in (1, 2)])
        grand = z.sum(axis=0) / (K * M)
        for i in range(n):
            for j in range(n):
                acc = 0.0
                for row in range(K * M):
                    acc += (z[row, i] - grand[i]) * (z[row, j] - grand[j])
                assert m.covariance[i, j] == pytest.approx(
                    acc / (K * M - n - 1), abs=1e-10)

    def test_exact_symmetry(self, rng):
        series = random_walk_series(rng, 31, 3)
        m = moment_estimates(series, 6, 6, 5)
        assert np.array_equal(m.covariance, m.covariance.T)

    def test_positive_semidefinite(self, rng):
        series = random_walk_series(rng, 61, 3)
        m = moment_estimates(series, 12, 12, 5)
        eigenvalues = np.linalg.eigvalsh(m.covariance)
        assert eigenvalues.min() >= -1e-9

    def test_degenerate_denominator_rejected(self):
        series = make_series(np.full((11, 9), 4.0))
        with pytest.raises(MarketDataError, match="denominator"):
            moment_estimates(series, 2, 2, 5)


class TestReturnWindow:
    def test_m1_window_is_previous_tensor(self, rng):
        series = random_walk_series(rng, 16, 2)
        window = return_window(series, 2, 1, 5)
        np.testing.assert_array_equal(window.tensors[0].values,
                                      fluctuation_tensor(series, 1, 5).values)

    def test_first_legal_window_boundary(self, rng):
        series = random_walk_series(rng, 21, 1)
        window = return_window(series, 4, 3, 5)
        assert [t.period_index for t in window.tensors] == [1, 2, 3]
        with pytest.raises(MarketDataError):
            return_window(series, 3, 3, 5)

    def test_composition_oracle(self, rng):
        series = random_walk_series(rng, 26, 2)
        window = return_window(series, 4, 3, 5)
        for offset, tensor in enumerate(window.tensors):
            np.testing.assert_array_equal(
                tensor.values, fluctuation_tensor(series, 1 + offset, 5).values)

    def test_last_tensor_property(self, rng):
        series = random_walk_series(rng, 31, 2)
        for t in range(4, 7):
            window = return_window(series, t, 3, 5)
            np.testing.assert_array_equal(
                window.tensors[-1].values,
                fluctuation_tensor(series, t - 1, 5).values)

    def test_flattening_is_chronological_row_major(self):
        series = make_series(np.exp2(np.arange(5.0))[:, None] * [[1.0, 2.0]])
        window = return_window(series, 3, 2, 2)
        flat = window.to_vector()
        assert flat.shape == (8,)
        np.testing.assert_array_equal(flat[:4], window.tensors[0].values.ravel())
