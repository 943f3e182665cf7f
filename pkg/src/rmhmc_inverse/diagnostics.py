"""Chain statistics: autocorrelation, effective sample size, credible bands, solve reports.

All statistics take retained (post burn-in) samples; :class:`~rmhmc_inverse.samplers.Chain`
exposes them as ``chain.retained``.
"""

from __future__ import annotations

import warnings

import numpy as np

MIN_BAND_SAMPLES = 40
PHASES = ("map", "metric", "sampling")


class ConstantSeriesWarning(RuntimeWarning):
    """Autocorrelation beyond lag 0 is undefined for a constant series."""


def autocorrelation(series, max_lag: int) -> np.ndarray:
    """Biased sample ACF for lags ``0..max_lag``.

    ``acf[l] = sum_t (x_t - m)(x_{t+l} - m) / sum_t (x_t - m)^2``.  Lags at or
    beyond the series length are 0.  A constant series gives ``acf[0] = 1`` and
    NaN elsewhere, with a :class:`ConstantSeriesWarning`.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("series must be a non-empty 1-D array")
    if max_lag < 0:
        raise ValueError("max_lag must be non-negative")
    y = x - x.mean()
    denom = float(y @ y)
    out = np.zeros(max_lag + 1)
    out[0] = 1.0
    if denom == 0.0 or not np.isfinite(denom):
        if max_lag > 0:
            warnings.warn("constant series: autocorrelation undefined beyond lag 0",
                          ConstantSeriesWarning, stacklevel=2)
            out[1:] = np.nan
        return out
    n = y.size
    # FFT with zero padding gives the full linear autocovariance in O(n log n)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(y, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    top = min(max_lag, n - 1)
    out[1:top + 1] = acov[1:top + 1] / acov[0]
    return out


def integrated_autocorrelation_time(series) -> float:
    """``1 + 2 sum_l acf[l]``, truncated by Geyer's initial positive sequence.

    Pairs ``acf[2m] + acf[2m+1]`` are summed while they stay positive.  The
    raw estimate is returned: below 1 (even non-positive) for anticorrelated
    chains, NaN for a constant series.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConstantSeriesWarning)
        acf = autocorrelation(x, n - 1)
    if np.isnan(acf[1]):
        warnings.warn("constant series: autocorrelation time undefined",
                      ConstantSeriesWarning, stacklevel=2)
        return float("nan")
    total = -1.0  # pair sums count acf[0] twice: tau = -1 + 2 * sum of pairs
    for m in range(n // 2):
        pair = acf[2 * m] + acf[2 * m + 1]
        if pair <= 0.0:
            break
        total += 2.0 * pair
    return float(total)


def effective_sample_size(series) -> float:
    """``n / tau`` with ``tau`` from :func:`integrated_autocorrelation_time`.

    Anticorrelated chains may legitimately report more than ``n``; a
    non-positive ``tau`` estimate gives ``inf``.
    """
    n = np.asarray(series).size
    return _ess(n, integrated_autocorrelation_time(series))


def _ess(n: int, tau: float) -> float:
    if np.isnan(tau):
        return float("nan")
    return float(n / tau) if tau > 0.0 else float("inf")


def credible_band(chain, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise equal-tailed band of ``level`` over samples ``(n, dim)``."""
    x = np.asarray(chain, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if x.shape[0] < MIN_BAND_SAMPLES:
        raise ValueError(f"need at least {MIN_BAND_SAMPLES} samples for a credible band, "
                         f"got {x.shape[0]}")
    tail = 0.5 * (1.0 - level)
    lo, hi = np.quantile(x, [tail, 1.0 - tail], axis=0)
    return lo, hi


def solve_report(chain=None, counter=None) -> dict:
    """PDE-solve totals with a per-phase breakdown.

    ``chain`` supplies the sampling phase (its cumulative solve column);
    ``counter`` supplies the remaining phases.  Averages are per proposal.
    """
    by_phase = {p: 0 for p in PHASES}
    if counter is not None:
        for name, count in counter.by_phase.items():
            by_phase[name] = int(count)
    n = 0
    if chain is not None:
        n = int(chain.cumulative_solves.size)
        by_phase["sampling"] = chain.sampling_solves
    sampling = by_phase["sampling"]
    return {
        "total": int(sum(by_phase.values())),
        "by_phase": by_phase,
        "n_proposals": n,
        "sampling_per_proposal": sampling / n if n else 0.0,
    }


def summarize(chain, max_lag: int = 100, level: float = 0.95) -> dict:
    """Acceptance, per-coordinate ACF/ESS/IACT, mean and band of the retained samples."""
    x = chain.retained
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConstantSeriesWarning)
        acf = [autocorrelation(x[:, j], max_lag) for j in range(x.shape[1])]
        tau = [integrated_autocorrelation_time(x[:, j]) for j in range(x.shape[1])]
    lo, hi = credible_band(x, level)
    return {
        "acceptance_rate": chain.acceptance_rate,
        "n_retained": int(x.shape[0]),
        "mean": x.mean(axis=0),
        "std": x.std(axis=0),
        "band_level": level,
        "band_lower": lo,
        "band_upper": hi,
        "acf": np.array(acf),
        "iact": np.array(tau),
        "ess": np.array([_ess(x.shape[0], t) for t in tau]),
    }
