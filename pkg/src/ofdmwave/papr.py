"""Power-ratio samples, the empirical CCDF and the PAPR_eps quantile."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .grid import SamplingConvention, oversample, require_papr_oversampling


@dataclass(frozen=True)
class PowerRatioSamples:
    alphas: np.ndarray
    source_oversampling: int


def collect_alpha(batch: np.ndarray, oversampling: int) -> PowerRatioSamples:
    """Instantaneous-to-average power ratios of every oversampled sample.

    The average power is estimated over the whole batch, so symbol-to-symbol
    energy differences show up in the ratios.
    """
    require_papr_oversampling(oversampling)
    z = oversample(batch, oversampling, SamplingConvention.UNIT_MEAN_POWER)
    power = (z.real ** 2 + z.imag ** 2).ravel()
    mean = power.mean() if power.size else 0.0
    if not mean > 0:
        raise NumericalError("zero average power in batch")
    return PowerRatioSamples(power / mean, int(oversampling))


def _alphas(samples) -> np.ndarray:
    a = samples.alphas if isinstance(samples, PowerRatioSamples) else np.asarray(samples, dtype=float)
    return a.ravel()


def papr_epsilon(samples, epsilon: float):
    """Smallest threshold exceeded by at most a fraction ``epsilon`` of samples.

    Returns ``(linear, dB)``.  ``epsilon = 0`` gives the maximum.
    """
    a = _alphas(samples)
    if a.size == 0:
        raise ValueError("no samples")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    s = np.sort(a)
    # P(alpha > s[k]) = (n - 1 - k') / n where k' is the last copy of s[k];
    # need (n - count(alpha <= e)) <= eps * n
    need = int(np.ceil(s.size * (1.0 - epsilon) - 1e-9))
    k = min(max(need, 1), s.size) - 1
    value = float(s[k])
    return value, float(10.0 * np.log10(value)) if value > 0 else float("-inf")


def ccdf(samples, thresholds) -> np.ndarray:
    """Empirical ``P(alpha > e)`` for each threshold ``e``."""
    a = np.sort(_alphas(samples))
    thresholds = np.asarray(thresholds, dtype=float)
    if a.size == 0:
        return np.zeros_like(thresholds)
    return 1.0 - np.searchsorted(a, thresholds, side="right") / a.size


def peak_power(batch: np.ndarray, oversampling: int) -> np.ndarray:
    """Per-symbol maximum of ``|z|^2`` (unit-mean-power convention)."""
    z = oversample(batch, oversampling, SamplingConvention.UNIT_MEAN_POWER)
    return np.max(z.real ** 2 + z.imag ** 2, axis=-1)
