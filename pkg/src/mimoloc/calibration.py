"""Two-stage CSI phase calibration from reference-point measurements.

Stage 1 removes the modeled line-of-sight response at known positions,
averages the residual phase per subcarrier, and fits the frequency-direction
error (linear slope, IQ imbalance, common phase) with a Levenberg-Marquardt
solver on wrapped residuals.  Stage 2 takes what remains per antenna and
estimates one offset each as a circular mean in the complex field.

All residuals are phases wrapped to (-pi, pi]; averages are taken on unit
phasors so wrap-around never biases them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .channel import CsiMatrix, frequency_phase_error, point_source_response


class CalibrationError(Exception):
    pass


class LowConfidenceOffsets(CalibrationError):
    """Antenna residuals too incoherent for a trustworthy circular mean."""

    def __init__(self, antennas, resultants):
        self.antennas = list(antennas)
        self.resultants = list(resultants)
        super().__init__(
            f"incoherent residual phase for antennas {self.antennas}")


class FitNotConverged(CalibrationError):
    """Iteration budget exhausted; carries the best solution found."""

    def __init__(self, best):
        self.best = best
        super().__init__(
            f"no convergence after {best.iterations} iterations "
            f"(residual rms {best.residual_rms:.3e} rad)")


@dataclass(frozen=True)
class ResidualPhase:
    """Stage-1 residuals after removing the modeled LoS response.

    ``residuals`` is wrapped phase per (sample, antenna, subcarrier);
    ``valid`` masks out zero-magnitude measurement entries, which carry no
    phase; ``mean_by_subcarrier`` is the circular mean over samples and
    antennas of the valid entries.
    """

    mean_by_subcarrier: np.ndarray
    residuals: np.ndarray
    valid: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.residuals.shape[0]


@dataclass(frozen=True)
class FrequencyCalibration:
    """Fitted frequency-direction error parameters (stage 1)."""

    iq_gain_mismatch: float
    iq_time_offset: float
    iq_phase_mismatch: float
    slope: float
    common_phase: float
    residual_rms: float
    iterations: int
    converged: bool
    flat_iq_direction: bool       # gain mismatch ~ 0: time/phase unresolved
    cost_trace: tuple[float, ...]

    def phase_model(self, indices) -> np.ndarray:
        return frequency_phase_error(indices, self.slope,
                                     self.iq_gain_mismatch,
                                     self.iq_time_offset,
                                     self.iq_phase_mismatch,
                                     self.common_phase)


@dataclass(frozen=True)
class CalibrationSolution:
    """Complete calibration: frequency-direction terms plus antenna offsets."""

    iq_gain_mismatch: float
    iq_time_offset: float
    iq_phase_mismatch: float
    slope: float
    common_phase: float
    antenna_offsets: np.ndarray
    fit_residual_rms: float

    def __post_init__(self):
        off = np.asarray(self.antenna_offsets, dtype=float)
        if np.any((off <= -np.pi - 1e-12) | (off > np.pi + 1e-12)):
            raise ValueError("antenna offsets must lie in (-pi, pi]")
        if self.fit_residual_rms < 0:
            raise ValueError("fit residual rms must be non-negative")
        object.__setattr__(self, "antenna_offsets", off)

    @classmethod
    def zero(cls, n_antennas: int) -> "CalibrationSolution":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, np.zeros(n_antennas), 0.0)

    def to_json(self) -> str:
        return json.dumps({
            "iq_gain_mismatch": self.iq_gain_mismatch,
            "iq_time_offset": self.iq_time_offset,
            "iq_phase_mismatch": self.iq_phase_mismatch,
            "slope": self.slope,
            "common_phase": self.common_phase,
            "antenna_offsets": self.antenna_offsets.tolist(),
            "fit_residual_rms": self.fit_residual_rms,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationSolution":
        d = json.loads(text)
        return cls(d["iq_gain_mismatch"], d["iq_time_offset"],
                   d["iq_phase_mismatch"], d["slope"], d["common_phase"],
                   np.asarray(d["antenna_offsets"]), d["fit_residual_rms"])


def wrap_phase(x):
    """Map phases to (-pi, pi] through the complex plane."""
    wrapped = np.angle(np.exp(1j * np.asarray(x, dtype=float)))
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def _as_batch(measurements, tx_positions):
    if isinstance(measurements, CsiMatrix):
        measurements = [measurements]
        tx_positions = np.asarray(tx_positions, float).reshape(1, -1)
    else:
        measurements = list(measurements)
        tx_positions = np.asarray(tx_positions, float)
        if tx_positions.ndim == 1:
            tx_positions = np.tile(tx_positions, (len(measurements), 1))
    if len(measurements) != len(tx_positions):
        raise ValueError("one transmit position required per measurement")
    return measurements, tx_positions


def residual_phase_after_los_removal(measurements, tx_positions,
                                     topology) -> ResidualPhase:
    """Wrapped phase of measurement over modeled LoS, per entry and averaged.

    ``measurements`` is a CsiMatrix or list of them, one per reference
    point; ``tx_positions`` the matching transmitter positions.  The model
    uses unit amplitudes: only its phase enters the residual.
    """
    measurements, tx_positions = _as_batch(measurements, tx_positions)
    residuals = []
    valid = []
    phasor_sum = None
    for csi, pos in zip(measurements, tx_positions):
        model = point_source_response(topology.element_positions, pos,
                                      csi.frequencies)
        ratio = csi.values * np.conj(model)
        ok = np.abs(csi.values) > 0
        residuals.append(np.angle(np.where(ok, ratio, 1.0)))
        valid.append(ok)
        unit = np.where(ok, ratio / np.where(ok, np.abs(ratio), 1.0), 0.0)
        contrib = unit.sum(axis=0)
        phasor_sum = contrib if phasor_sum is None else phasor_sum + contrib
    mean = np.angle(phasor_sum)
    return ResidualPhase(mean, np.array(residuals), np.array(valid))


def estimate_sto_peak(batch) -> int:
    """Most frequent beyond-first peak bin of per-antenna power delay
    profiles, the signature of a sample-timing offset.

    Ties break toward the smaller bin index.
    """
    if isinstance(batch, CsiMatrix):
        batch = [batch]
    batch = list(batch)
    if not batch:
        raise ValueError("empty CSI batch")
    n_k = batch[0].n_subcarriers
    counts = np.zeros(n_k, dtype=int)
    for csi in batch:
        pdp = np.abs(np.fft.ifft(csi.values, axis=1)) ** 2
        peaks = 1 + np.argmax(pdp[:, 1:], axis=1)
        counts += np.bincount(peaks, minlength=n_k)
    return int(np.argmax(counts[1:]) + 1)


def _iq_model_and_jacobian(params, idx):
    """Error model in solver coordinates (a, b, time_offset, slope, q).

    The IQ numerator expands as eps_g*sin(n*t + eps_p) = a*sin(n*t)
    + b*cos(n*t), so the term becomes arctan(a*tan(n*t) + b).  Away from
    the tangent poles that is approximately a*tan(n*t) + b, making b
    degenerate with the common phase; solving for q = common + b and
    subtracting b from the arctan keeps the Jacobian well conditioned.
    """
    a, b, time_off, slope, q = params
    with np.errstate(divide="ignore", invalid="ignore"):
        tan = np.tan(idx * time_off)
        t = a * tan + b
        model = np.arctan(t) - b + slope * idx + q
        damp = 1.0 / (1.0 + t * t)
        d_a = damp * tan
        d_b = damp - 1.0
        d_time = damp * a * idx / np.cos(idx * time_off) ** 2
    for col in (model, d_a, d_time):
        np.nan_to_num(col, copy=False, posinf=0.0, neginf=0.0)
    jac = np.column_stack([d_a, d_b, d_time, idx, np.ones_like(idx)])
    return model, jac


def _wrapped_cost(params, mean_residual, idx):
    model, jac = _iq_model_and_jacobian(params, idx)
    err = np.angle(np.exp(1j * (mean_residual + model)))
    return err, jac, float(err @ err)


def _levenberg_marquardt(start, mean_residual, idx, damping, max_iterations,
                         step_tol, cols=None):
    """Damped least squares on the wrapped objective.

    ``cols`` restricts updates to a parameter subset while the rest stay
    frozen (the valley refinement and the flat-direction collapse use
    this).  Convergence is an accepted vanishing step, a vanishing
    predicted reduction, a cost at the arithmetic floor, a run of
    accepted steps that no longer move the cost (a noise-limited basin,
    e.g. multipath left in the averaged residual), or damping pushed to
    its ceiling, which means no direction descends at double precision.
    A single rejected tiny proposal only raises the damping, since near
    a curved valley floor it says nothing about the gradient.
    """
    params = np.asarray(start, dtype=float)
    active = np.arange(5) if cols is None else np.asarray(cols, dtype=int)
    err, jac, cost = _wrapped_cost(params, mean_residual, idx)
    floor = len(idx) * 1e-26
    lam = damping
    trace = [cost]
    converged = cost < floor
    iterations = 0
    stalled = 0
    while not converged and iterations < max_iterations:
        iterations += 1
        sub = jac[:, active]
        jtj = sub.T @ sub
        jte = sub.T @ err
        scale = np.diag(np.maximum(np.diag(jtj), 1e-12))
        try:
            step = np.linalg.solve(jtj + lam * scale, -jte)
        except np.linalg.LinAlgError:
            lam *= 10.0
            if lam > 1e16:
                break
            continue
        predicted = -(2.0 * (jte @ step) + step @ (jtj @ step))
        if predicted < 1e-15 * max(cost, floor):
            converged = True
            break
        cand = params.copy()
        cand[active] += step
        new_err, new_jac, new_cost = _wrapped_cost(cand, mean_residual, idx)
        if new_cost < cost:
            stalled = stalled + 1 if cost - new_cost < 1e-12 * cost else 0
            params, err, jac, cost = cand, new_err, new_jac, new_cost
            trace.append(cost)
            lam = max(lam / 10.0, 1e-12)
            if np.linalg.norm(step) < step_tol or cost < floor \
                    or stalled >= 3:
                converged = True
        else:
            lam *= 10.0
            if lam > 1e16:
                converged = True
    return params, cost, trace, converged, iterations


def _solve_line(params, mean_residual, idx):
    """Exact least-squares update of (slope, q) at a fixed IQ shape."""
    model, _ = _iq_model_and_jacobian(params, idx)
    err = np.angle(np.exp(1j * (mean_residual + model)))
    design = np.column_stack([idx, np.ones_like(idx)])
    delta, *_ = np.linalg.lstsq(design, -err, rcond=None)
    out = params.copy()
    out[3:] += delta
    return out


def _refine_valley(best, mean_residual, idx, damping, max_iterations,
                   step_tol):
    """Descend the shallow valley the joint iteration crawls along.

    The weakly identified direction is essentially b (its effect away from
    the tangent poles is a constant the intercept absorbs), so joint steps
    there lose to damping inflation.  A pattern search on b that refits the
    remaining parameters at each probe walks the valley directly; a joint
    pass then settles everything and supplies the convergence flag.
    """
    params, cost, trace, converged, iterations = best
    floor = len(idx) * 1e-26
    others = (0, 2, 3, 4)
    width = 0.04
    budget = 160
    while width > 1e-9 and cost > floor and budget > 0:
        moved = False
        for b_probe in (params[1] - width, params[1] + width):
            start = params.copy()
            start[1] = b_probe
            start = _solve_line(start, mean_residual, idx)
            probe = _levenberg_marquardt(start, mean_residual, idx, damping,
                                         80, step_tol, cols=others)
            iterations += probe[4]
            budget -= 1
            if probe[1] < cost:
                params, cost = probe[0], probe[1]
                trace.append(cost)
                moved = True
                break
        if not moved:
            width /= 4.0
    final = _levenberg_marquardt(params, mean_residual, idx, damping,
                                 max_iterations, step_tol)
    iterations += final[4]
    if final[1] <= cost:
        params, cost = final[0], final[1]
        trace.extend(final[2][1:])
    return params, cost, trace, final[3] or cost < floor, iterations


def _to_public(params):
    """Solver coordinates back to (gain, time_offset, phase_offset, slope,
    common phase), with gain non-negative and phases wrapped."""
    a, b, time_off, slope, q = params
    gain = math.hypot(a, b)
    phase_off = float(wrap_phase(math.atan2(b, a)))
    common = float(wrap_phase(q - b))
    return gain, float(time_off), phase_off, float(slope), common


def fit_frequency_calibration(mean_residual, indices=None, sto_hint=None,
                              damping=1e-3, max_iterations=200,
                              step_tol=1e-10) -> FrequencyCalibration:
    """Fit slope, IQ imbalance, and common phase to the averaged residual.

    Minimizes the wrapped misfit between ``mean_residual`` and the negated
    error model (the residual of measurement over model carries the error
    sum with a minus sign, so the fitted parameters equal the injected
    ones).  ``sto_hint``, in taps, seeds the slope with its 2*pi*K/N ramp.
    Raises :class:`FitNotConverged` with the best parameters attached when
    the iteration budget runs out.
    """
    mean_residual = np.asarray(mean_residual, dtype=float)
    n_k = len(mean_residual)
    if n_k < 5:
        raise ValueError("need at least as many subcarriers as parameters")
    idx = np.arange(1, n_k + 1, dtype=float) if indices is None \
        else np.asarray(indices, dtype=float)

    # slope/intercept seed from circular statistics; remove any tap-offset
    # ramp first so steep slopes do not alias.  Averaging phase-difference
    # phasors is immune to the pi-sized jump at a tangent pole, which throws
    # a cumulative unwrap off by a whole turn
    base = 0.0 if sto_hint is None else 2.0 * math.pi * sto_hint / n_k
    shifted = wrap_phase(mean_residual + base * idx)
    step_h = (idx[-1] - idx[0]) / (n_k - 1)
    diffs = wrap_phase(np.diff(shifted))
    slope_res = float(np.angle(np.sum(np.exp(1j * diffs)))) / step_h
    level = wrap_phase(shifted - slope_res * idx)
    common0 = float(-np.angle(np.sum(np.exp(1j * level))))
    slope0 = float(base - slope_res)

    # the IQ term jumps by about pi where cos(n * time_offset) crosses zero;
    # a large step in the detrended remainder brackets the crossing between
    # two samples, so seed the time offset with the pole at their midpoint
    # (a pole placed exactly on a sample leaves it on the wrong side and
    # the resulting wrapped outlier derails the descent)
    time_starts = [k * math.pi / (2 * n_k)
                   for k in (0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0,
                             16.0, 24.0, 32.0)]
    remainder = wrap_phase(level + common0)
    jumps = np.abs(np.diff(remainder))
    if jumps.max() > 1.0:
        left = int(np.argmax(jumps))
        n_pole = 0.5 * (idx[left] + idx[left + 1])
        time_starts = [math.pi / (2.0 * n_pole)] + time_starts

    best = None
    for t0 in time_starts:
        start = np.array([0.1, 0.0, t0, slope0, common0])
        fit = _levenberg_marquardt(start, mean_residual, idx, damping,
                                   max_iterations, step_tol)
        if best is None or fit[1] < best[1]:
            best = fit
        if best[1] < 1e-20:
            break
    params, cost, trace, converged, iterations = _refine_valley(
        best, mean_residual, idx, damping, max_iterations, step_tol)

    # flat IQ directions leave (a, b) undetermined up to line compensations:
    # a vanishing tangent argument hides a behind the slope, and without a
    # tangent pole in band b trades against the intercept.  Collapse them to
    # the most parsimonious representative whose refitted misfit matches the
    # unconstrained one to within statistical insignificance
    tol = max(len(idx) * 1e-22, 4.0 * cost / max(len(idx) - 5, 1))
    ca, cb, ct, cs, cq = params
    line_slope = cs + ca * ct / (1.0 + cb * cb)
    line_q = cq + math.atan(cb) - cb
    collapses = (
        (np.array([0.0, 0.0, ct, line_slope, line_q]), (2, 3, 4)),
        (np.array([0.0, cb, ct, line_slope, cq]), (1, 2, 3, 4)),
        (np.array([ca, 0.0, ct, cs, line_q]), (0, 2, 3, 4)),
    )
    for collapsed, free in collapses:
        refit = _levenberg_marquardt(collapsed, mean_residual, idx, damping,
                                     100, step_tol, cols=free)
        if refit[1] <= cost + tol:
            params, cost = refit[0], refit[1]
            iterations += refit[4]
            if cost < trace[-1]:
                trace.append(cost)
            break
    gain, time_off, phase_off, slope, common = _to_public(params)
    rms = math.sqrt(cost / n_k)
    result = FrequencyCalibration(
        iq_gain_mismatch=gain, iq_time_offset=time_off,
        iq_phase_mismatch=phase_off, slope=slope,
        common_phase=common, residual_rms=rms,
        iterations=iterations, converged=converged,
        flat_iq_direction=gain < 1e-3, cost_trace=tuple(trace))
    if not converged:
        raise FitNotConverged(result)
    return result


def antenna_residuals_after_fit(residual: ResidualPhase,
                                fit: FrequencyCalibration,
                                indices=None) -> np.ndarray:
    """Stage-2 residual per (sample, antenna, subcarrier): what remains of
    the modeled-minus-measured phase once the fitted frequency-direction
    terms are removed.  Its circular mean per antenna is that antenna's
    offset."""
    n_k = residual.residuals.shape[2]
    idx = np.arange(1, n_k + 1, dtype=float) if indices is None \
        else np.asarray(indices, dtype=float)
    return wrap_phase(-residual.residuals - fit.phase_model(idx)[None, None, :])


def estimate_antenna_offsets(delta_psi, valid=None, min_samples=64,
                             min_resultant=0.2) -> np.ndarray:
    """Per-antenna circular mean of stage-2 residuals.

    ``delta_psi`` has shape (samples, antennas, subcarriers).  Requires at
    least ``min_samples`` reference points; antennas whose mean resultant
    length falls below ``min_resultant`` raise :class:`LowConfidenceOffsets`.
    """
    delta_psi = np.asarray(delta_psi, dtype=float)
    if delta_psi.ndim != 3:
        raise ValueError("expected (samples, antennas, subcarriers) residuals")
    if delta_psi.shape[0] < min_samples:
        raise ValueError(
            f"need at least {min_samples} reference samples, "
            f"got {delta_psi.shape[0]}")
    phasors = np.exp(1j * delta_psi)
    if valid is not None:
        phasors = np.where(np.asarray(valid, bool), phasors, 0.0)
        counts = np.asarray(valid, bool).sum(axis=(0, 2))
    else:
        counts = np.full(delta_psi.shape[1],
                         delta_psi.shape[0] * delta_psi.shape[2])
    resultant = phasors.sum(axis=(0, 2))
    lengths = np.abs(resultant) / np.maximum(counts, 1)
    weak = np.nonzero(lengths < min_resultant)[0]
    if len(weak):
        raise LowConfidenceOffsets(weak.tolist(), lengths[weak].tolist())
    return wrap_phase(np.angle(resultant))


def apply_calibration(raw: CsiMatrix, solution: CalibrationSolution) -> CsiMatrix:
    """Undo the modeled phase errors; magnitudes pass through untouched."""
    if len(solution.antenna_offsets) != raw.n_antennas:
        raise ValueError("solution antenna count does not match the CSI")
    idx = raw.subcarrier_indices
    freq = frequency_phase_error(idx, solution.slope,
                                 solution.iq_gain_mismatch,
                                 solution.iq_time_offset,
                                 solution.iq_phase_mismatch,
                                 solution.common_phase)
    total = freq[None, :] + solution.antenna_offsets[:, None]
    return CsiMatrix(raw.values * np.exp(1j * total), raw.frequencies)


def calibrate_from_reference(measurements, tx_positions, topology,
                             min_samples=64,
                             min_resultant=0.2) -> CalibrationSolution:
    """End-to-end calibration from reference-point CSI at known positions."""
    measurements, tx_positions = _as_batch(measurements, tx_positions)
    residual = residual_phase_after_los_removal(measurements, tx_positions,
                                                topology)
    sto = estimate_sto_peak(measurements)
    fit = fit_frequency_calibration(residual.mean_by_subcarrier,
                                    sto_hint=sto)
    delta_psi = antenna_residuals_after_fit(residual, fit)
    offsets = estimate_antenna_offsets(delta_psi, valid=residual.valid,
                                       min_samples=min_samples,
                                       min_resultant=min_resultant)
    return CalibrationSolution(
        iq_gain_mismatch=fit.iq_gain_mismatch,
        iq_time_offset=fit.iq_time_offset,
        iq_phase_mismatch=fit.iq_phase_mismatch,
        slope=fit.slope, common_phase=fit.common_phase,
        antenna_offsets=offsets, fit_residual_rms=fit.residual_rms)
