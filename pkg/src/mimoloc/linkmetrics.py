"""Link-quality metrics: Gaussian tail functions and effective SNR.

The effective SNR compresses a frequency-selective channel into the single
SNR an equivalent flat channel would need to produce the same mean bit error
probability under QPSK with maximum-ratio combining across antennas:

    gamma_k   = sum_nr |H[nr, k]|^2 / noise_variance
    p_k       = Q(sqrt(gamma_k))
    gamma_eff = Q^{-1}(mean_k p_k)^2

Mean bit error probabilities are accumulated in log space so deep-SNR
channels do not underflow before the inverse map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, log_ndtr, ndtri, ndtri_exp

_SQRT2 = math.sqrt(2.0)


def q_function(x):
    """Gaussian tail probability Q(x) = P(N(0,1) > x).

    Returned in extended precision (``np.longdouble``) where the platform
    has it: for negative x the value sits next to 1, and the complementary
    tail 1 - Q(x) would otherwise be truncated to double spacing, which
    caps the accuracy of a later inversion near x = -6 at about 1e-8.
    """
    x = np.asarray(x, dtype=float)
    tail = np.longdouble(0.5) * erfc(np.abs(x) / _SQRT2)
    return np.where(x >= 0, tail, np.longdouble(1.0) - tail)


def q_inverse(p):
    """Inverse of :func:`q_function` on (0, 1); endpoints map to +/-inf.

    Values above one half are inverted through the symmetric branch
    Q^{-1}(p) = -Q^{-1}(1 - p), with the complement taken before rounding
    to double so extended-precision probabilities keep their accuracy.
    """
    p = np.asarray(p, dtype=np.longdouble)
    if np.any((p < 0.0) | (p > 1.0)):
        raise ValueError("probabilities must lie in [0, 1]")
    upper = p > 0.5
    tail = np.where(upper, np.longdouble(1.0) - p, p)
    x = -ndtri(tail.astype(float))
    return np.where(upper, -x, x)[()]


def _log_q(x):
    """log Q(x), stable far into the tail."""
    return log_ndtr(-np.asarray(x, dtype=float))


@dataclass(frozen=True)
class EffectiveSnr:
    """Effective SNR summary for one channel snapshot."""

    gamma: float           # linear effective SNR
    gamma_db: float
    mean_bit_error: float  # may underflow to 0.0 even when gamma is finite
    saturated: bool        # True when the mean bit error is exactly zero

    def __float__(self):
        return self.gamma


def effective_snr(csi, noise_variance=1.0, antennas=None) -> EffectiveSnr:
    """Effective SNR of one CSI snapshot of shape (n_antennas, n_subcarriers).

    ``antennas`` optionally restricts the combining to a subset (an index
    array), which is how per-sub-array link quality is evaluated.
    """
    if noise_variance <= 0:
        raise ValueError("noise variance must be positive")
    csi = np.asarray(csi)
    if csi.ndim != 2 or csi.size == 0:
        raise ValueError("csi must be a non-empty (antennas, subcarriers) array")
    if antennas is not None:
        csi = csi[np.asarray(antennas)]

    with np.errstate(over="ignore"):   # inf gains saturate cleanly below
        gamma_k = np.sum(np.abs(csi) ** 2, axis=0) / noise_variance
    log_p = _log_q(np.sqrt(gamma_k))
    # mean of p_k without leaving log space
    log_mean = np.logaddexp.reduce(log_p) - math.log(len(log_p))
    mean_p = float(np.exp(log_mean))

    if not np.isfinite(log_mean):
        return EffectiveSnr(math.inf, math.inf, 0.0, True)
    gamma = float(-ndtri_exp(log_mean)) ** 2
    return EffectiveSnr(gamma, 10.0 * math.log10(gamma) if gamma > 0 else -math.inf,
                        mean_p, False)


def effective_snr_per_subarray(csi, subarrays, noise_variance=1.0) -> list[EffectiveSnr]:
    """Effective SNR restricted to each sub-array's antennas in turn."""
    return [effective_snr(csi, noise_variance, sub.element_indices)
            for sub in subarrays]
