import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rmhmc_inverse.diagnostics import (
    ConstantSeriesWarning, autocorrelation, credible_band, effective_sample_size,
    integrated_autocorrelation_time, solve_report, summarize,
)
from rmhmc_inverse.fem import SolveCounter
from rmhmc_inverse.samplers import Chain


def ar1(phi, n, seed=0):
    rng = np.random.default_rng(seed)
    x = np.empty(n)
    x[0] = rng.standard_normal() / np.sqrt(1 - phi**2)
    e = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


def test_acf_direct_oracle():
    x = np.random.default_rng(1).standard_normal(257)
    y = x - x.mean()
    direct = np.array([y[: y.size - k] @ y[k:] for k in range(11)]) / (y @ y)
    assert np.allclose(autocorrelation(x, 10), direct, atol=1e-12)


def test_acf_hand_case_and_long_lags():
    acf = autocorrelation([1.0, -1.0, 1.0, -1.0], 6)
    assert np.allclose(acf, [1.0, -0.75, 0.5, -0.25, 0, 0, 0], atol=1e-14)


def test_ar1_oracle():
    x = ar1(0.9, 100_000)
    assert autocorrelation(x, 1)[1] == pytest.approx(0.9, abs=0.01)
    # tau = (1 + phi) / (1 - phi) = 19
    assert integrated_autocorrelation_time(x) == pytest.approx(19.0, rel=0.15)


def test_iid_ess_near_n():
    x = np.random.default_rng(2).standard_normal(20_000)
    assert 0.85 <= effective_sample_size(x) / x.size <= 1.15


def test_anticorrelated_and_constant_series():
    alt = np.tile([1.0, -1.0], 500)
    assert effective_sample_size(alt) == np.inf
    with pytest.warns(ConstantSeriesWarning):
        acf = autocorrelation(np.ones(10), 3)
    assert acf[0] == 1.0 and np.all(np.isnan(acf[1:]))
    with pytest.warns(ConstantSeriesWarning):
        assert np.isnan(effective_sample_size(np.full(10, 2.5)))


@settings(max_examples=40)
@given(st.integers(0, 10**6), st.floats(-100, 100), st.floats(0.01, 100))
def test_affine_invariance(seed, shift, scale):
    x = ar1(0.5, 400, seed)
    y = shift + scale * x
    assert np.allclose(autocorrelation(x, 20), autocorrelation(y, 20), atol=1e-9)
    assert effective_sample_size(y) == pytest.approx(effective_sample_size(x), rel=1e-8)


@settings(max_examples=40)
@given(st.integers(0, 10**6), st.floats(0.5, 0.99))
def test_band_contains_median_and_nests(seed, level):
    x = np.random.default_rng(seed).standard_normal((200, 3))
    lo, hi = credible_band(x, level)
    wide_lo, wide_hi = credible_band(x, min(0.999, level + 0.005))
    med = np.median(x, axis=0)
    assert np.all(lo <= med) and np.all(med <= hi)
    assert np.all(wide_lo <= lo) and np.all(hi <= wide_hi)


def test_band_quantile_oracle_and_minimum():
    x = np.arange(1.0, 101.0)
    lo, hi = credible_band(x, 0.9)
    assert lo[0] == pytest.approx(np.quantile(x, 0.05)) and hi[0] == pytest.approx(np.quantile(x, 0.95))
    with pytest.raises(ValueError):
        credible_band(np.zeros((39, 2)))
    with pytest.raises(ValueError):
        credible_band(x, 1.0)


def _chain(n=100, burn=10):
    rng = np.random.default_rng(0)
    return Chain(rng.standard_normal((n, 2)), np.zeros(n), rng.random(n) < 0.7,
                 np.arange(1, n + 1) * 4, burn, np.zeros(2))


def test_solve_report():
    c = SolveCounter("map")
    c.add(36)
    c.set_phase("metric")
    c.add(2)
    rep = solve_report(_chain(), c)
    assert rep["by_phase"] == {"map": 36, "metric": 2, "sampling": 400}
    assert rep["total"] == 438 and rep["n_proposals"] == 100
    assert rep["sampling_per_proposal"] == 4.0
    assert solve_report()["total"] == 0


def test_summarize_uses_retained_samples():
    ch = _chain()
    out = summarize(ch, max_lag=5)
    assert out["n_retained"] == 90
    assert np.allclose(out["mean"], ch.samples[10:].mean(0))
    assert out["acf"].shape == (2, 6) and out["ess"].shape == (2,)
    assert out["acceptance_rate"] == ch.acceptance_rate


def test_white_noise_acf_band():
    x = np.random.default_rng(4).standard_normal(10_000)
    acf = autocorrelation(x, 10)[1:]
    assert np.sum(np.abs(acf) > 3 / np.sqrt(x.size)) <= 1


def test_standard_normal_band():
    x = np.random.default_rng(5).standard_normal((10_000, 3))
    lo, hi = credible_band(x)
    assert np.all(np.abs(lo + 1.96) <= 0.08) and np.all(np.abs(hi - 1.96) <= 0.08)


def test_identical_samples_zero_width_band():
    lo, hi = credible_band(np.full((50, 2), 0.25))
    assert np.all(lo == 0.25) and np.all(hi == 0.25)


def test_band_widens_with_level():
    x = ar1(0.3, 2000)
    widths = [np.subtract(*credible_band(x, lv)[::-1])[0] for lv in (0.5, 0.9, 0.95)]
    assert widths[0] <= widths[1] <= widths[2]
