"""Closed-form geometric positioning baselines.

One anchor per sub-array, placed at its phase center with the panel's
boresight yaw.  Bearings triangulate through a least-squares line
intersection; ranges (measured or inverted from amplitude via a
log-distance path-loss model) trilaterate through the linearized
difference-of-squares system plus one Gauss-Newton correction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class DegenerateGeometry(ValueError):
    """Anchor layout cannot localize: parallel bearings, collinear anchors."""


@dataclass(frozen=True)
class AnchorObservation:
    """Measurements a single anchor contributes.

    ``boresight`` is the anchor's world yaw (radians, from +x); ``aoa``
    is the locally measured azimuth, counted positive toward the panel's
    -u axis, so the world bearing of the target is boresight - aoa.
    """

    position: tuple[float, float]
    boresight: float
    aoa: float | None = None
    range_m: float | None = None
    amp_db: float | None = None

    def __post_init__(self):
        if self.aoa is None and self.range_m is None and self.amp_db is None:
            raise ValueError("anchor carries no measurement")
        if self.range_m is not None and self.range_m <= 0:
            raise ValueError("range must be positive")

    @property
    def xy(self) -> np.ndarray:
        return np.asarray(self.position, dtype=float)[:2]


@dataclass(frozen=True)
class FixResult:
    """Position estimate with the root-mean-square equation residual."""

    position: np.ndarray
    residual: float

    def __iter__(self):
        yield float(self.position[0])
        yield float(self.position[1])


def triangulate_aoa(observations, cond_limit: float = 1e8) -> FixResult:
    """Least-squares intersection of the anchors' bearing lines.

    Each bearing contributes the line-normal equation n.(q - p) = 0;
    near-parallel bearings make the normal system ill-conditioned and
    raise :class:`DegenerateGeometry`.
    """
    observations = [o for o in observations if o.aoa is not None]
    if len(observations) < 2:
        raise ValueError("need at least two bearing observations")
    rows, rhs = [], []
    for obs in observations:
        theta = obs.boresight - obs.aoa
        normal = np.array([-math.sin(theta), math.cos(theta)])
        rows.append(normal)
        rhs.append(normal @ obs.xy)
    matrix = np.vstack(rows)
    if np.linalg.cond(matrix) > cond_limit:
        raise DegenerateGeometry("bearings are parallel or nearly so")
    position, *_ = np.linalg.lstsq(matrix, np.asarray(rhs), rcond=None)
    residual = matrix @ position - rhs
    return FixResult(position, float(np.sqrt(np.mean(residual ** 2))))


def trilaterate(observations, cond_limit: float = 1e8) -> FixResult:
    """Range-based fix: difference-of-squares start, one Gauss-Newton step.

    Subtracting the first circle equation from the rest linearizes the
    problem exactly for consistent ranges; the Gauss-Newton pass then
    re-balances the true nonlinear residuals under noise.
    """
    observations = [o for o in observations if o.range_m is not None]
    if len(observations) < 3:
        raise ValueError("need at least three range observations")
    anchors = np.vstack([o.xy for o in observations])
    ranges = np.array([o.range_m for o in observations])

    base, r_base = anchors[0], ranges[0]
    matrix = 2.0 * (anchors[1:] - base)
    rhs = (np.sum(anchors[1:] ** 2, axis=1) - np.sum(base ** 2)
           - ranges[1:] ** 2 + r_base ** 2)
    if np.linalg.cond(matrix) > cond_limit:
        raise DegenerateGeometry("anchors are collinear or nearly so")
    position, *_ = np.linalg.lstsq(matrix, rhs, rcond=None)

    offsets = position - anchors
    distances = np.linalg.norm(offsets, axis=1)
    safe = np.maximum(distances, 1e-12)
    jac = offsets / safe[:, None]
    errors = distances - ranges
    step, *_ = np.linalg.lstsq(jac, errors, rcond=None)
    position = position - step

    errors = np.linalg.norm(position - anchors, axis=1) - ranges
    return FixResult(position, float(np.sqrt(np.mean(errors ** 2))))


@dataclass(frozen=True)
class PathLossModel:
    """Log-distance model: amp_db = reference_db - 10*exponent*log10(r)."""

    reference_db: float
    exponent: float = 2.0
    reference_range: float = 1.0

    def __post_init__(self):
        if self.exponent <= 0 or self.reference_range <= 0:
            raise ValueError("exponent and reference range must be positive")


def amp_to_range(amp_db: float, model: PathLossModel) -> float:
    """Invert the path-loss model to a range in meters.

    Amplitudes above the reference sit closer than the calibrated
    reference range; they clamp there with a warning.
    """
    if amp_db > model.reference_db:
        warnings.warn("amplitude above the path-loss reference; "
                      "clamping to the reference range")
        return model.reference_range
    exponent_term = (model.reference_db - amp_db) / (10.0 * model.exponent)
    return model.reference_range * 10.0 ** exponent_term


def fit_path_loss(amps_db, ranges, exponent: float = 2.0,
                  reference_range: float = 1.0) -> PathLossModel:
    """Least-squares reference power for known ranges at fixed exponent.

    Pick ``reference_range`` at or below the closest expected geometry so
    the above-reference clamp stays out of the calibrated regime.
    """
    amps_db = np.asarray(amps_db, dtype=float)
    ranges = np.asarray(ranges, dtype=float)
    if amps_db.shape != ranges.shape or amps_db.size == 0:
        raise ValueError("need matching nonempty amplitude/range arrays")
    if np.any(ranges <= 0):
        raise ValueError("ranges must be positive")
    reference = float(np.mean(
        amps_db + 10.0 * exponent * np.log10(ranges / reference_range)))
    return PathLossModel(reference_db=reference, exponent=exponent,
                         reference_range=reference_range)
