"""Multipath CSI synthesis and front-end impairment injection.

The clean channel follows the specular model

    H[:, k] = sum_l alpha_l * c(Omega_l) * exp(-j*2*pi*f_k*tau_l)

with c the plane-wave steering vector and a single-element transmitter.
Measured CSI multiplies each entry by phase-error terms that are constant
along antennas but vary with the subcarrier index n_k (sampling offset,
carrier ramp, IQ imbalance) and terms constant along subcarriers but
varying per antenna (common phase plus per-antenna offsets), then adds
circularly-symmetric complex Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import ArrayTopology, Direction, SubArray, partition_sliding, steering_vector


@dataclass(frozen=True)
class MultipathComponent:
    """One specular propagation path.

    ``elevation`` is None for paths described by 1-D arrays, which resolve
    no elevation.  ``power_db`` is relative to the strongest path of the
    set the component belongs to, hence never positive.  A zero amplitude
    marks a dead component: estimators emit it when a path's residual has
    nothing left, and synthesis skips it.
    """

    amplitude: complex
    azimuth: float
    delay: float
    elevation: float | None = None
    power_db: float = 0.0

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("path delay must be non-negative")
        if self.power_db > 1e-12:
            raise ValueError("relative path power cannot exceed 0 dB")

    @property
    def direction(self) -> Direction:
        return Direction(self.azimuth, self.elevation)


@dataclass(frozen=True)
class PathSet:
    """A nonempty collection of paths with consistent relative powers."""

    paths: tuple[MultipathComponent, ...]

    def __init__(self, paths):
        paths = tuple(paths)
        if not paths:
            raise ValueError("a path set needs at least one path")
        peak = max(abs(p.amplitude) for p in paths)
        if peak == 0:
            raise ValueError("a path set needs at least one live path")
        object.__setattr__(self, "paths", tuple(
            replace(p, power_db=-math.inf if p.amplitude == 0 else
                    20.0 * math.log10(abs(p.amplitude) / peak))
            for p in paths))

    def __len__(self):
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)


@dataclass(frozen=True)
class CsiMatrix:
    """CSI snapshot: complex (antennas x subcarriers) plus the frequency grid."""

    values: np.ndarray
    frequencies: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        freqs = np.asarray(self.frequencies, dtype=float)
        if values.ndim != 2:
            raise ValueError("CSI values must be (antennas, subcarriers)")
        if freqs.ndim != 1 or len(freqs) != values.shape[1]:
            raise ValueError("frequency grid must match the subcarrier count")
        steps = np.diff(freqs)
        if len(freqs) > 1:
            if np.any(steps <= 0):
                raise ValueError("subcarrier frequencies must increase")
            if np.any(np.abs(steps - steps[0]) > 1e-6 * steps[0]):
                raise ValueError("subcarrier frequencies must be evenly spaced")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "frequencies", freqs)

    @property
    def n_antennas(self) -> int:
        return self.values.shape[0]

    @property
    def n_subcarriers(self) -> int:
        return self.values.shape[1]

    @property
    def subcarrier_indices(self) -> np.ndarray:
        """1-based index n_k used by the impairment model."""
        return np.arange(1, self.n_subcarriers + 1)

    @property
    def bandwidth(self) -> float:
        return float(self.frequencies[-1] - self.frequencies[0])


def subcarrier_grid(center=2.61e9, bandwidth=20e6, count=100) -> np.ndarray:
    """Evenly spaced subcarrier frequencies spanning ``bandwidth`` end to end."""
    if count < 2:
        raise ValueError("need at least two subcarriers")
    return center - bandwidth / 2 + np.arange(count) * (bandwidth / (count - 1))


def synthesize_csi(array, paths, frequencies) -> CsiMatrix:
    """Clean CSI for ``paths`` over ``frequencies``.

    ``array`` is a SubArray or an ArrayTopology; topologies evaluate each
    panel's full window with the path directions read in that panel's own
    local frame.
    """
    frequencies = np.asarray(frequencies, dtype=float)
    if frequencies.size == 0:
        raise ValueError("empty frequency grid")
    if isinstance(array, ArrayTopology):
        subs = partition_sliding(array, array.panels[0].shape)
    else:
        subs = [array]
    if isinstance(paths, MultipathComponent):
        paths = PathSet([paths])
    elif not isinstance(paths, PathSet):
        paths = PathSet(paths)

    blocks = []
    for sub in subs:
        h = np.zeros((sub.n_elements, len(frequencies)), dtype=complex)
        for p in paths:
            ramp = np.exp(-2j * np.pi * frequencies * p.delay)
            h += p.amplitude * np.outer(steering_vector(sub, p.direction), ramp)
        blocks.append(h)
    return CsiMatrix(np.vstack(blocks), frequencies)


@dataclass(frozen=True)
class ImpairmentParams:
    """Front-end error terms applied to clean CSI.

    Frequency-direction phases (per subcarrier index n_k = 1..N_k):
    ``sfo_slope * n_k`` for the sampling-frequency ramp,
    ``2*pi*n_k*k_sto/N_k`` for a sample-timing offset of ``k_sto`` taps,
    and the IQ-imbalance term of :func:`iq_phase_error`.  Antenna-direction
    phases: ``common_phase`` shared by all antennas plus one entry of
    ``antenna_offsets`` each.  ``noise_std`` is the standard deviation of
    the added circularly-symmetric complex noise.
    """

    sfo_slope: float = 0.0
    k_sto: int = 0
    iq_gain_mismatch: float = 0.0
    iq_phase_mismatch: float = 0.0
    iq_time_offset: float = 0.0
    common_phase: float = 0.0
    antenna_offsets: np.ndarray | None = None
    noise_std: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise std must be non-negative")
        if self.k_sto != int(self.k_sto):
            raise ValueError("k_sto must be an integer tap count")
        if self.antenna_offsets is not None:
            off = np.asarray(self.antenna_offsets, dtype=float)
            if np.any((off <= -np.pi) | (off > np.pi)):
                raise ValueError("antenna offsets must lie in (-pi, pi]")
            object.__setattr__(self, "antenna_offsets", off)


def iq_phase_error(indices, gain_mismatch, time_offset, phase_mismatch):
    """Phase distortion of IQ imbalance at subcarrier indices ``indices``:
    arctan(eps_g * sin(n*t + eps_p) / cos(n*t))."""
    n = np.asarray(indices, dtype=float)
    with np.errstate(divide="ignore"):
        return np.arctan(gain_mismatch * np.sin(n * time_offset + phase_mismatch)
                         / np.cos(n * time_offset))


def frequency_phase_error(indices, slope, gain_mismatch, time_offset,
                          phase_mismatch, common_phase):
    """Total frequency-direction phase error at subcarrier indices
    ``indices`` for a combined linear slope (sampling plus timing ramps
    share one coefficient) and the IQ term, plus the common phase."""
    n = np.asarray(indices, dtype=float)
    return (slope * n
            + iq_phase_error(n, gain_mismatch, time_offset, phase_mismatch)
            + common_phase)


def apply_impairments(clean: CsiMatrix, imp: ImpairmentParams, seed=None) -> CsiMatrix:
    """Corrupt ``clean`` with the phase errors and noise of ``imp``.

    Deterministic for a fixed ``seed``.  With all-zero impairments the
    output equals the input bit for bit.
    """
    n_r, n_k = clean.values.shape
    offsets = imp.antenna_offsets
    if offsets is None:
        offsets = np.zeros(n_r)
    if len(offsets) != n_r:
        raise ValueError(f"expected {n_r} antenna offsets, got {len(offsets)}")

    idx = clean.subcarrier_indices
    freq_phase = (imp.sfo_slope * idx
                  + 2.0 * np.pi * idx * imp.k_sto / n_k
                  + iq_phase_error(idx, imp.iq_gain_mismatch,
                                   imp.iq_time_offset, imp.iq_phase_mismatch))
    ant_phase = imp.common_phase + offsets
    values = clean.values * np.exp(-1j * (freq_phase[None, :] + ant_phase[:, None]))
    if imp.noise_std > 0:
        rng = np.random.default_rng(seed)
        scale = imp.noise_std / math.sqrt(2.0)
        values = values + scale * (rng.standard_normal((n_r, n_k))
                                   + 1j * rng.standard_normal((n_r, n_k)))
    return CsiMatrix(values, clean.frequencies)


def noise_std_for_snr(csi: CsiMatrix, snr_db: float) -> float:
    """Complex-noise std giving ``snr_db`` against the mean entry power."""
    power = float(np.mean(np.abs(csi.values) ** 2))
    return math.sqrt(power * 10.0 ** (-snr_db / 10.0))


def point_source_response(positions, point, frequencies, amplitudes=None):
    """Exact spherical-wavefront response of a point source.

    Returns exp(-j*2*pi*f*r_m/c) per (element, frequency), optionally scaled
    by per-element ``amplitudes``; the phase reference is absolute, so the
    common term carries the true time of flight r_m/c.
    """
    from .geometry import C_LIGHT

    positions = np.asarray(positions, dtype=float)
    r = np.linalg.norm(np.asarray(point, dtype=float) - positions, axis=1)
    if np.any(r == 0):
        raise ValueError("source point coincides with an element")
    values = np.exp(-2j * np.pi * np.outer(r, np.asarray(frequencies, float))
                    / C_LIGHT)
    if amplitudes is not None:
        values = values * np.asarray(amplitudes).reshape(-1, 1)
    return values
