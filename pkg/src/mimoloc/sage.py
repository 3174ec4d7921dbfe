"""Iterative multipath extraction from calibrated sub-array CSI.

Paths are estimated one at a time: a correlation-based initializer locks
onto the strongest remaining component, then alternating expectation
(per-path residual) and maximization (coordinate-wise grid refresh) sweeps
refine all components jointly.  Extraction stops when a newly initialized
path falls a configurable dynamic range below the strongest one, which
doubles as the model-order estimate.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .channel import CsiMatrix, MultipathComponent
from .geometry import Direction, SubArray, steering_vector


class NoPathSignal(ValueError):
    """Raised when an all-zero residual leaves nothing to initialize on."""


class NoLineOfSight(LookupError):
    """Raised when no component qualifies as the line-of-sight path."""


@dataclass(frozen=True)
class SageConfig:
    """Grid and schedule settings for the extractor.

    ``delay_step``/``delay_span`` default (``None``) to a quarter of the
    inverse measurement bandwidth and half the delay-domain alias period.
    Angle grids run coarse-to-fine: ``refinement_levels`` local passes
    shrink the step geometrically from ``angle_step`` to
    ``angle_step_fine`` (delays shrink by 4 per level).  ``peak_interp``
    adds a final parabolic peak fit, kept only when it beats the grid;
    without it the delay quantization alone leaves a noiseless residual
    of order (pi*B*step)^2/12 in energy.
    """

    max_paths: int = 8
    stop_dynamic_range: float = 30.0
    delay_step: float | None = None
    delay_span: float | None = None
    angle_step: float = math.radians(1.0)
    angle_step_fine: float = math.radians(0.1)
    refinement_levels: int = 2
    em_cycles: int = 10
    peak_interp: bool = True

    def __post_init__(self):
        if self.max_paths < 1:
            raise ValueError("max_paths must be positive")
        if self.stop_dynamic_range <= 0:
            raise ValueError("stop_dynamic_range must be positive")
        for name in ("delay_step", "delay_span"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.angle_step <= 0 or self.angle_step_fine <= 0:
            raise ValueError("angle grid steps must be positive")
        if self.angle_step_fine > self.angle_step:
            raise ValueError("fine angle step cannot exceed the coarse one")
        if self.refinement_levels < 0:
            raise ValueError("refinement_levels must be non-negative")
        if self.em_cycles < 1:
            raise ValueError("em_cycles must be positive")


def _local_steering(u, v, wavelength, azimuths, elevations=None):
    """Steering matrix (elements x angles) on local in-plane coordinates.

    Column j equals ``steering_vector`` for the j-th angle; elevations are
    broadcast against azimuths when given (both 1-D of equal length).
    """
    azimuths = np.asarray(azimuths, dtype=float)
    if elevations is None:
        comp_u = np.sin(azimuths)
        comp_v = np.zeros_like(comp_u)
    else:
        elevations = np.asarray(elevations, dtype=float)
        comp_u = np.sin(azimuths) * np.cos(elevations)
        comp_v = np.sin(elevations)
    phase = (-2.0 * np.pi / wavelength) * (np.outer(u, comp_u)
                                           + np.outer(v, comp_v))
    return np.exp(1j * phase)


class _Workspace:
    """Per-(sub-array, grid) caches shared across extraction steps."""

    def __init__(self, sub: SubArray, frequencies, cfg: SageConfig):
        self.sub = sub
        self.cfg = cfg
        self.frequencies = np.asarray(frequencies, dtype=float)
        if self.frequencies.size < 2:
            raise ValueError("need at least two subcarriers")
        span = self.frequencies[-1] - self.frequencies[0]
        spacing = self.frequencies[1] - self.frequencies[0]
        self.delay_step = cfg.delay_step or 1.0 / (4.0 * span)
        self.delay_span = cfg.delay_span or 0.5 / spacing
        self.delays = np.arange(0.0, self.delay_span + 0.5 * self.delay_step,
                                self.delay_step)
        self.delay_basis = np.exp(
            2j * np.pi * np.outer(self.frequencies, self.delays))
        self.u, self.v = sub.local_uv()
        self.wavelength = sub.parent.carrier_wavelength
        half = 0.5 * math.pi
        self.azimuths = np.arange(-half, half + 1e-12, cfg.angle_step)
        if sub.is_planar:
            self.elevations = self.azimuths.copy()
            az_mesh, el_mesh = np.meshgrid(self.azimuths, self.elevations,
                                           indexing="ij")
            self.mesh_az = az_mesh.ravel()
            self.mesh_el = el_mesh.ravel()
            self.steer_coarse = _local_steering(
                self.u, self.v, self.wavelength, self.mesh_az, self.mesh_el)
        else:
            self.elevations = None
            self.steer_coarse = _local_steering(
                self.u, self.v, self.wavelength, self.azimuths)
        levels = cfg.refinement_levels
        self.delay_steps = [self.delay_step * 0.25 ** (k + 1)
                            for k in range(levels)]
        if levels:
            factor = (cfg.angle_step_fine / cfg.angle_step) ** (1.0 / levels)
            self.angle_steps = [cfg.angle_step * factor ** (k + 1)
                                for k in range(levels)]
        else:
            self.angle_steps = []
        # factored local-search tables: the basis at tau0 + offsets is the
        # tone at tau0 times these, so refinement needs no fresh exp grid
        scale = -2.0 * np.pi / self.wavelength
        self._su = scale * self.u
        self._sv = scale * self.v
        offsets = np.arange(-5.0, 6.0)
        self._refine_taus = [step * offsets for step in self.delay_steps]
        self._refine_bases = [
            np.exp(2j * np.pi * np.outer(self.frequencies, taus))
            for taus in self._refine_taus]
        self._probe_taus = self.fine_delay_step * np.array([-1.0, 0.0, 1.0])
        self._probe_basis = np.exp(
            2j * np.pi * np.outer(self.frequencies, self._probe_taus))

    @property
    def fine_delay_step(self) -> float:
        return self.delay_steps[-1] if self.delay_steps else self.delay_step

    @property
    def fine_angle_step(self) -> float:
        return self.angle_steps[-1] if self.angle_steps else self.cfg.angle_step

    def _steer(self, azimuths, elevations=None) -> np.ndarray:
        """Steering matrix from the pre-scaled coordinates (elements x angles)."""
        az = np.asarray(azimuths, dtype=float)
        if elevations is None:
            phase = self._su[:, None] * np.sin(az)
        else:
            el = np.asarray(elevations, dtype=float)
            phase = (self._su[:, None] * (np.sin(az) * np.cos(el))
                     + self._sv[:, None] * np.sin(el))
        return np.exp(1j * phase)

    def steering(self, direction: Direction) -> np.ndarray:
        el = direction.elevation
        return self._steer([direction.azimuth],
                           None if el is None else [el])[:, 0]

    def delay_tone(self, delay: float) -> np.ndarray:
        return np.exp(2j * np.pi * self.frequencies * delay)

    def _delay_power(self, beamformed, delays):
        basis = np.exp(2j * np.pi * np.outer(self.frequencies, delays))
        return np.abs(beamformed @ basis) ** 2

    def best_delay(self, beamformed, current=None):
        """Argmax of the frequency-correlation power over the delay grids."""
        power = np.abs(beamformed @ self.delay_basis) ** 2
        pick = int(np.argmax(power))
        best_tau, best_power = float(self.delays[pick]), float(power[pick])
        if current is not None:
            cur = float(self._delay_power(beamformed, [current])[0])
            if cur > best_power:
                best_tau, best_power = float(current), cur
        weighted_tau = None
        for taus, basis in zip(self._refine_taus, self._refine_bases):
            local = best_tau + taus
            keep = local >= 0.0
            if weighted_tau != best_tau:
                weighted = beamformed * self.delay_tone(best_tau)
                weighted_tau = best_tau
            power = np.abs(weighted @ basis[:, keep]) ** 2
            local = local[keep]
            pick = int(np.argmax(power))
            if power[pick] > best_power:
                best_tau, best_power = float(local[pick]), float(power[pick])
        if self.cfg.peak_interp:
            probes = best_tau + self._probe_taus
            if probes[0] >= 0.0:
                if weighted_tau != best_tau:
                    weighted = beamformed * self.delay_tone(best_tau)
                vertex = _parabolic_vertex(
                    probes, np.abs(weighted @ self._probe_basis) ** 2)
                if vertex is not None and vertex >= 0.0:
                    cand = float(self._delay_power(beamformed, [vertex])[0])
                    if cand > best_power:
                        best_tau, best_power = float(vertex), cand
        return best_tau

    def _angle_power(self, matched, azimuths, elevations=None):
        steer = self._steer(azimuths, elevations)
        return np.abs(steer.conj().T @ matched) ** 2

    def best_angle(self, matched, current=None):
        """Argmax of the beamforming power over the angle grids."""
        power = np.abs(self.steer_coarse.conj().T @ matched) ** 2
        pick = int(np.argmax(power))
        planar = self.sub.is_planar
        if planar:
            best = [float(self.mesh_az[pick]), float(self.mesh_el[pick])]
        else:
            best = [float(self.azimuths[pick]), None]
        best_power = float(power[pick])
        if current is not None:
            az, el = current
            cur = float(self._angle_power(
                matched, [az], None if el is None else [el])[0])
            if cur > best_power:
                best, best_power = [az, el], cur
        half = 0.5 * math.pi
        offsets = np.arange(-5.0, 6.0)
        for step in self.angle_steps:
            az_local = np.clip(best[0] + step * offsets, -half, half)
            if planar:
                el_local = np.clip(best[1] + step * offsets, -half, half)
                az_mesh, el_mesh = np.meshgrid(az_local, el_local,
                                               indexing="ij")
                power = self._angle_power(matched, az_mesh.ravel(),
                                          el_mesh.ravel())
                pick = int(np.argmax(power))
                if power[pick] > best_power:
                    best = [float(az_mesh.ravel()[pick]),
                            float(el_mesh.ravel()[pick])]
                    best_power = float(power[pick])
            else:
                power = self._angle_power(matched, az_local)
                pick = int(np.argmax(power))
                if power[pick] > best_power:
                    best = [float(az_local[pick]), None]
                    best_power = float(power[pick])
        if self.cfg.peak_interp:
            step = self.fine_angle_step
            probes = np.clip(best[0] + step * np.array([-1.0, 0.0, 1.0]),
                             -half, half)
            elevations = None if best[1] is None else [best[1]] * 3
            vertex = _parabolic_vertex(
                probes, self._angle_power(matched, probes, elevations))
            if vertex is not None and abs(vertex) <= half:
                cand_el = None if best[1] is None else [best[1]]
                cand = float(self._angle_power(matched, [vertex],
                                               cand_el)[0])
                if cand > best_power:
                    best[0], best_power = float(vertex), cand
            if planar:
                probes = np.clip(best[1] + step * np.array([-1.0, 0.0, 1.0]),
                                 -half, half)
                vertex = _parabolic_vertex(
                    probes, self._angle_power(matched, [best[0]] * 3, probes))
                if vertex is not None and abs(vertex) <= half:
                    cand = float(self._angle_power(matched, [best[0]],
                                                   [vertex])[0])
                    if cand > best_power:
                        best[1], best_power = float(vertex), cand
        return best[0], best[1]

    def project_amplitude(self, values, direction: Direction, delay: float):
        """Least-squares amplitude of the single-path model against values."""
        steer = self.steering(direction)
        tone = np.exp(-2j * np.pi * self.frequencies * delay)
        inner = steer.conj() @ values @ tone.conj()
        return inner / (len(steer) * len(tone))

    def reconstruct(self, component: MultipathComponent) -> np.ndarray:
        steer = self.steering(component.direction)
        tone = np.exp(-2j * np.pi * self.frequencies * component.delay)
        return component.amplitude * (steer[:, None] * tone)


def _parabolic_vertex(x, y):
    """Vertex abscissa of the parabola through three points, if concave."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    denom = (y[0] - 2.0 * y[1] + y[2])
    if denom >= 0.0 or not np.all(np.isfinite(y)):
        return None
    shift = 0.5 * (y[0] - y[2]) / denom
    if abs(shift) > 1.0:
        return None
    return float(x[1] + shift * (x[1] - x[0]))


def _projected_power(ws: _Workspace, values, direction, delay) -> float:
    amp = ws.project_amplitude(values, direction, delay)
    return float(abs(amp) ** 2 * values.size)


def _initialize(values, ws: _Workspace) -> MultipathComponent:
    if not np.any(values):
        raise NoPathSignal("residual carries no signal")
    matched_all = values @ ws.delay_basis
    profile = np.sum(np.abs(matched_all) ** 2, axis=0)
    pick = int(np.argmax(profile))
    delay = float(ws.delays[pick])
    azimuth, elevation = ws.best_angle(matched_all[:, pick])
    direction = Direction(azimuth, elevation)
    amplitude = ws.project_amplitude(values, direction, delay)
    return MultipathComponent(amplitude=complex(amplitude), azimuth=azimuth,
                              delay=delay, elevation=elevation, power_db=0.0)


def initialize_mpc(residual_csi: CsiMatrix, sub: SubArray,
                   cfg: SageConfig | None = None,
                   _workspace: _Workspace | None = None) -> MultipathComponent:
    """Seed one path from correlation peaks of the residual.

    The delay comes from the power-summed (per-antenna, hence angle-blind)
    frequency correlation, the direction from the beamforming spectrum at
    that delay, and the amplitude from the matched-filter projection.
    Raises :class:`NoPathSignal` on an all-zero residual.
    """
    ws = _workspace or _Workspace(sub, residual_csi.frequencies,
                                  cfg or SageConfig())
    return _initialize(residual_csi.values, ws)


def expectation_step(csi: CsiMatrix, components, index: int,
                     sub: SubArray) -> CsiMatrix:
    """Residual signal for one path: the input minus every other path.

    ``index`` addresses ``components``; the indexed path's own contribution
    stays in the output, which the maximization step then refits.
    """
    components = list(components)
    components[index]  # raise IndexError early on a bad index
    ws = _Workspace(sub, csi.frequencies, SageConfig())
    return CsiMatrix(_peel(csi.values, components, ws, keep=index),
                     csi.frequencies)


def _peel(values, components, ws, keep=None):
    out = values.copy()
    for k, comp in enumerate(components):
        if k == keep or comp.amplitude == 0:
            continue
        out -= ws.reconstruct(comp)
    return out


def _maximize(values, current: MultipathComponent,
              ws: _Workspace) -> MultipathComponent:
    if not np.any(values):
        return replace(current, amplitude=0j)
    steer = ws.steering(current.direction)
    beamformed = steer.conj() @ values
    delay = ws.best_delay(beamformed, current=current.delay)
    matched = values @ ws.delay_tone(delay)
    azimuth, elevation = ws.best_angle(
        matched, current=(current.azimuth, current.elevation))
    direction = Direction(azimuth, elevation)
    amplitude = ws.project_amplitude(values, direction, delay)
    return replace(current, amplitude=complex(amplitude), azimuth=azimuth,
                   delay=delay, elevation=elevation)


def maximization_step(residual: CsiMatrix, sub: SubArray,
                      current: MultipathComponent,
                      cfg: SageConfig | None = None,
                      _workspace: _Workspace | None = None
                      ) -> MultipathComponent:
    """Coordinate refresh of one path against its residual.

    Updates delay (direction fixed), then direction (new delay fixed),
    then the closed-form amplitude.  Each stage scans a grid containing
    the current estimate, so the projected power never decreases.  A zero
    residual returns the component dead (zero amplitude).
    """
    ws = _workspace or _Workspace(sub, residual.frequencies,
                                  cfg or SageConfig())
    return _maximize(residual.values, current, ws)


def _em_sweeps(csi_values, components, ws: _Workspace):
    """Full expectation/maximization cycles with a small-move early exit.

    Caches the per-path reconstructions and the all-paths residual so each
    expectation step is a single addition rather than a rebuild over every
    other path.  Returns the surviving components together with the final
    total residual (input minus every survivor).
    """
    if not components:
        return [], csi_values.copy()
    recons = [ws.reconstruct(c) for c in components]
    total = csi_values - np.sum(recons, axis=0)
    for _ in range(ws.cfg.em_cycles):
        moved = False
        for index, comp in enumerate(components):
            updated = _maximize(total + recons[index], comp, ws)
            if abs(updated.delay - comp.delay) > ws.fine_delay_step:
                moved = True
            if abs(updated.azimuth - comp.azimuth) > ws.fine_angle_step:
                moved = True
            if comp.elevation is not None and \
                    abs(updated.elevation - comp.elevation) > ws.fine_angle_step:
                moved = True
            components[index] = updated
            fresh = ws.reconstruct(updated)
            total += recons[index] - fresh
            recons[index] = fresh
        if not moved:
            break
    # dead components reconstruct to zeros, so the residual needs no rebuild
    live = [c for c in components if c.amplitude != 0]
    return live, total


def sage_extract(csi: CsiMatrix, sub: SubArray,
                 cfg: SageConfig | None = None,
                 _workspace: _Workspace | None = None
                 ) -> list[MultipathComponent]:
    """Extract multipath components until the dynamic-range stop.

    Initializes paths successively on the total residual, re-sweeping all
    components after each admission.  A new path whose initialized power
    sits ``cfg.stop_dynamic_range`` or more below the strongest extracted
    one ends the search; the survivors come back sorted by descending
    power with ``power_db`` relative to the strongest.
    """
    ws = _workspace or _Workspace(sub, csi.frequencies, cfg or SageConfig())
    if _workspace is not None and \
            not np.array_equal(ws.frequencies, csi.frequencies):
        raise ValueError("workspace frequencies do not match the CSI")
    cfg = ws.cfg
    components: list[MultipathComponent] = []
    residual = csi.values
    while len(components) < cfg.max_paths:
        try:
            candidate = _initialize(residual, ws)
        except NoPathSignal:
            break
        if components:
            strongest = max(abs(c.amplitude) for c in components)
            if abs(candidate.amplitude) == 0 or 20.0 * math.log10(
                    abs(candidate.amplitude) / strongest
                    ) <= -cfg.stop_dynamic_range:
                break
        elif candidate.amplitude == 0:
            break
        components.append(candidate)
        components, residual = _em_sweeps(csi.values, components, ws)
    if not components:
        return []
    components.sort(key=lambda c: abs(c.amplitude), reverse=True)
    peak = abs(components[0].amplitude)
    return [replace(c, power_db=20.0 * math.log10(abs(c.amplitude) / peak))
            for c in components]


def select_los(components, window_db: float = 6.0) -> MultipathComponent:
    """Earliest arrival among the paths within ``window_db`` of the peak.

    The first strong peak of the delay profile is the direct path; the
    power window keeps late, weak arrivals from stealing the pick.
    """
    components = list(components)
    if not components:
        raise NoLineOfSight("no components to choose from")
    peak = max(abs(c.amplitude) for c in components)
    if peak == 0:
        raise NoLineOfSight("all components are dead")
    qualified = [c for c in components
                 if 20.0 * math.log10(abs(c.amplitude) / peak) >= -window_db]
    return min(qualified, key=lambda c: c.delay)


MPC_CSV_FIELDS = ("sample_id", "subarray_id", "path_index", "power_db",
                  "azimuth_deg", "elevation_deg", "tof_ns")


def _format(value: float) -> str:
    return f"{value:.12g}"


def write_mpc_csv(records, stream=None) -> str:
    """Serialize extraction results as CSV and return the text.

    ``records`` yields ``(sample_id, subarray_id, components)`` triples;
    rows keep the component order (1-based ``path_index``), angles in
    degrees, delay in nanoseconds, and a blank elevation for 1-D arrays.
    When ``stream`` is given the text is also written there.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(MPC_CSV_FIELDS)
    for sample_id, subarray_id, components in records:
        for rank, comp in enumerate(components, start=1):
            writer.writerow((
                sample_id,
                subarray_id,
                rank,
                _format(comp.power_db),
                _format(math.degrees(comp.azimuth)),
                "" if comp.elevation is None
                else _format(math.degrees(comp.elevation)),
                _format(comp.delay * 1e9),
            ))
    text = buffer.getvalue()
    if stream is not None:
        stream.write(text)
    return text
