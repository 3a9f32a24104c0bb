"""Split-Rhat, rank-normalized bulk ESS and Monte Carlo standard errors.

All functions take draws shaped ``(chains, samples)`` or
``(chains, samples, params)`` and return one value per parameter.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import fft
from scipy.special import ndtri
from scipy.stats import rankdata

from app.errors import DimensionError, NumericalWarning


def _as_3d(draws: np.ndarray) -> np.ndarray:
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 2:
        draws = draws[:, :, None]
    if draws.ndim != 3:
        raise DimensionError("Draws must be shaped (chains, samples) or (chains, samples, params).")
    if draws.shape[0] < 2 or draws.shape[1] < 4:
        raise DimensionError("At least 2 chains with 4 samples each are required.")
    return draws


def _split_halves(draws: np.ndarray) -> np.ndarray:
    half = draws.shape[1] // 2
    return np.concatenate([draws[:, :half], draws[:, -half:]], axis=0)


def degenerate_parameters(draws: np.ndarray) -> np.ndarray:
    """True where some chain has zero variance for the parameter."""
    draws = _as_3d(draws)
    return np.any(np.var(draws, axis=1) == 0.0, axis=0)


def _finish(values: np.ndarray, degenerate: np.ndarray, draws_ndim: int, label: str) -> np.ndarray:
    if np.any(degenerate):
        warnings.warn(
            f"{label}: {int(degenerate.sum())} parameter(s) have constant chains.",
            NumericalWarning,
            stacklevel=3,
        )
    return values if draws_ndim == 3 else values[0]


def split_rhat(draws: np.ndarray) -> np.ndarray:
    """Potential scale reduction over the 2·chains half-chains; +inf where within-chain variance is 0."""
    ndim = np.ndim(draws)
    halves = _split_halves(_as_3d(draws))
    n = halves.shape[1]
    within = np.mean(np.var(halves, axis=1, ddof=1), axis=0)
    between = n * np.var(np.mean(halves, axis=1), axis=0, ddof=1)
    degenerate = within == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        var_hat = (n - 1) / n * within + between / n
        rhat = np.sqrt(var_hat / within)
    rhat = np.where(degenerate, np.inf, rhat)
    return _finish(rhat, degenerate, ndim, "split_rhat")


def _autocovariance(chains: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row, computed by FFT."""
    n = chains.shape[1]
    centered = chains - chains.mean(axis=1, keepdims=True)
    size = fft.next_fast_len(2 * n)
    spectrum = fft.rfft(centered, n=size, axis=1)
    return fft.irfft(spectrum * np.conjugate(spectrum), n=size, axis=1)[:, :n] / n


def _ess_single(chains: np.ndarray) -> float:
    """Geyer initial-monotone-sequence ESS for one parameter, chains × samples."""
    m, n = chains.shape
    acov = _autocovariance(chains)
    mean_var = np.mean(acov[:, 0]) * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += np.var(np.mean(chains, axis=1), ddof=1)
    if not var_plus > 0:
        return 0.0
    rho = 1.0 - (mean_var - np.mean(acov, axis=0)) / var_plus
    rho[0] = 1.0

    # initial positive sequence over pairs (rho[2k] + rho[2k+1])
    kept = np.zeros(n)
    kept[0], kept[1] = rho[0], rho[1]
    t = 1
    even, odd = rho[0], rho[1]
    while t < n - 3 and even + odd > 0.0:
        even, odd = rho[t + 1], rho[t + 2]
        if even + odd >= 0.0:
            kept[t + 1], kept[t + 2] = even, odd
        t += 2
    last = t - 2
    if even > 0.0:
        kept[last + 1] = even

    # initial monotone sequence
    t = 1
    while t <= last - 2:
        if kept[t + 1] + kept[t + 2] > kept[t - 1] + kept[t]:
            kept[t + 1] = kept[t + 2] = 0.5 * (kept[t - 1] + kept[t])
        t += 2

    total = m * n
    tau = -1.0 + 2.0 * np.sum(kept[: last + 1]) + np.sum(kept[last + 1 : last + 2])
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def _rank_normalize(values: np.ndarray) -> np.ndarray:
    ranks = rankdata(values, method="average").reshape(values.shape)
    return ndtri((ranks - 0.375) / (values.size + 0.25))


def ess_bulk(draws: np.ndarray) -> np.ndarray:
    """Rank-normalized split-chain effective sample size; 0 for constant chains."""
    ndim = np.ndim(draws)
    halves = _split_halves(_as_3d(draws))
    degenerate = np.var(halves.reshape(-1, halves.shape[2]), axis=0) == 0.0
    out = np.zeros(halves.shape[2])
    for j in np.flatnonzero(~degenerate):
        out[j] = _ess_single(_rank_normalize(halves[:, :, j]))
    return _finish(out, degenerate, ndim, "ess_bulk")


def ess_mean(draws: np.ndarray) -> np.ndarray:
    """Split-chain ESS of the raw draws, the one that governs the error of the mean."""
    ndim = np.ndim(draws)
    halves = _split_halves(_as_3d(draws))
    out = np.zeros(halves.shape[2])
    for j in range(halves.shape[2]):
        if np.var(halves[:, :, j]) > 0.0:
            out[j] = _ess_single(halves[:, :, j])
    return out if ndim == 3 else out[0]


def mcse_mean(draws: np.ndarray) -> np.ndarray:
    draws3 = _as_3d(draws)
    sd = np.std(draws3.reshape(-1, draws3.shape[2]), axis=0, ddof=1)
    ess = np.atleast_1d(ess_mean(draws3))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(ess > 0, sd / np.sqrt(ess), np.inf)
    return out if np.ndim(draws) == 3 else out[0]
