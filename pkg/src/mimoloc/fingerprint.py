"""Position fingerprinting: per-sub-array LoS metrics to 2-D location.

A metric scheme picks any nonempty subset of {amplitude, AoA, ToF}; the
feature vector concatenates the chosen metrics sub-array by sub-array.
Two independently tuned kernel regressors map features to the x and y
coordinates.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .svr import SolverNotConverged, SvrModel, SvrParams, fit_svr

FORMAT_TAG = "fingerprint-model/1"


class IncompleteSample(ValueError):
    """A sub-array is missing its LoS component; the sample is unusable."""


class LayoutMismatch(ValueError):
    """Feature vector does not match the model's training layout."""


@dataclass(frozen=True)
class MetricScheme:
    """Subset of the per-path metrics fed to the regressor."""

    amp: bool = False
    aoa: bool = False
    tof: bool = False

    def __post_init__(self):
        if not (self.amp or self.aoa or self.tof):
            raise ValueError("a scheme needs at least one metric")

    @property
    def label(self) -> str:
        parts = [name for name in ("amp", "aoa", "tof")
                 if getattr(self, name)]
        return "+".join(parts)

    @classmethod
    def from_label(cls, text: str) -> "MetricScheme":
        flags = {}
        for part in text.split("+"):
            name = part.strip().lower()
            if name not in ("amp", "aoa", "tof"):
                raise ValueError(f"unknown metric {part!r}")
            flags[name] = True
        return cls(**flags)

    @classmethod
    def all_schemes(cls) -> tuple["MetricScheme", ...]:
        """The seven nonempty combinations, single metrics first."""
        labels = ("amp", "aoa", "tof", "amp+aoa", "amp+tof", "aoa+tof",
                  "amp+aoa+tof")
        return tuple(cls.from_label(label) for label in labels)

    def width(self, planar: bool) -> int:
        """Feature count contributed by one sub-array."""
        return (self.amp + self.tof
                + (2 if planar else 1) * self.aoa)


def feature_labels(n_subarrays, scheme: MetricScheme,
                   planar: bool) -> tuple[str, ...]:
    """Column names in vector order, e.g. ``sub03.aoa_az``."""
    labels = []
    for index in range(n_subarrays):
        if scheme.amp:
            labels.append(f"sub{index:02d}.amp_db")
        if scheme.aoa:
            labels.append(f"sub{index:02d}.aoa_az")
            if planar:
                labels.append(f"sub{index:02d}.aoa_el")
        if scheme.tof:
            labels.append(f"sub{index:02d}.tof_ns")
    return tuple(labels)


def build_features(los_components, scheme: MetricScheme) -> np.ndarray:
    """Assemble one feature vector from per-sub-array LoS components.

    Components come in partition order; each contributes its metrics in
    the order amplitude (dB), azimuth then elevation (radians), ToF (ns).
    A ``None`` entry raises :class:`IncompleteSample`.
    """
    components = list(los_components)
    if not components:
        raise IncompleteSample("no sub-array components")
    missing = [i for i, c in enumerate(components) if c is None]
    if missing:
        raise IncompleteSample(f"no LoS component for sub-array(s) {missing}")
    planar = components[0].elevation is not None
    if any((c.elevation is not None) != planar for c in components):
        raise ValueError("mixed 1-D and planar sub-array components")
    out = []
    for comp in components:
        if abs(comp.amplitude) == 0:
            raise IncompleteSample("dead component cannot be featurized")
        if scheme.amp:
            out.append(20.0 * math.log10(abs(comp.amplitude)))
        if scheme.aoa:
            out.append(comp.azimuth)
            if planar:
                out.append(comp.elevation)
        if scheme.tof:
            out.append(comp.delay * 1e9)
    vector = np.asarray(out, dtype=float)
    if not np.all(np.isfinite(vector)):
        raise ValueError("non-finite feature values")
    return vector


@dataclass
class ErrorReport:
    """Euclidean position-error statistics plus the full CDF."""

    mae: float
    median: float
    percentile_90: float
    percentile_95: float
    cdf: np.ndarray    # (n, 2) sorted error against cumulative fraction

    @classmethod
    def from_errors(cls, errors) -> "ErrorReport":
        errors = np.sort(np.asarray(errors, dtype=float))
        if errors.size == 0:
            raise ValueError("empty error set")
        fractions = np.arange(1, errors.size + 1) / errors.size
        return cls(
            mae=float(np.mean(errors)),
            median=float(np.percentile(errors, 50)),
            percentile_90=float(np.percentile(errors, 90)),
            percentile_95=float(np.percentile(errors, 95)),
            cdf=np.column_stack([errors, fractions]),
        )


@dataclass
class FingerprintModel:
    """Two coordinate regressors plus the shared feature normalization."""

    scheme: MetricScheme
    feature_mean: np.ndarray
    feature_std: np.ndarray
    model_x: SvrModel
    model_y: SvrModel
    metadata: dict

    @property
    def n_features(self) -> int:
        return len(self.feature_mean)

    def standardize(self, features) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        if features.shape[1] != self.n_features:
            raise LayoutMismatch(
                f"model expects {self.n_features} features, "
                f"got {features.shape[1]}")
        return (features - self.feature_mean) / self.feature_std

    def predict(self, features) -> np.ndarray:
        """(n, 2) positions for (n, d) features; accepts a single vector."""
        squeeze = np.asarray(features).ndim == 1
        std = self.standardize(features)
        out = np.column_stack([self.model_x.predict(std),
                               self.model_y.predict(std)])
        return out[0] if squeeze else out


def _stack_samples(samples):
    features, positions = [], []
    for vector, position in samples:
        features.append(np.asarray(vector, dtype=float))
        positions.append(np.asarray(position, dtype=float)[:2])
    if len(features) < 2:
        raise ValueError("need at least two training samples")
    return np.vstack(features), np.vstack(positions)


def _cv_folds(n, n_folds, rng):
    order = rng.permutation(n)
    return [order[k::n_folds] for k in range(n_folds)]


def _search_coordinate(std_features, targets, budget, rng, tol,
                       search_index=None):
    """Random log-grid search, 5-fold cross-validated on MAE.

    ``search_index`` restricts the cross-validation to a subset of rows;
    the returned model is always refit on the full training set.
    """
    n, dim = std_features.shape
    spread = float(np.std(targets))
    if spread == 0.0:
        return fit_svr(std_features, targets, SvrParams(tol=tol)), None
    pool = std_features if search_index is None else std_features[search_index]
    goals = targets if search_index is None else targets[search_index]
    m = len(pool)
    folds = _cv_folds(m, min(5, m), rng)
    best_score, best_params = math.inf, None
    for _ in range(budget):
        params = SvrParams(
            c=10.0 ** rng.uniform(-1.0, 3.0),
            epsilon=spread * 10.0 ** rng.uniform(-3.0, -1.0),
            kernel_scale=math.sqrt(dim) * 10.0 ** rng.uniform(-2.0, 2.0),
            tol=tol,
        )
        score = 0.0
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                for fold in folds:
                    mask = np.ones(m, dtype=bool)
                    mask[fold] = False
                    model = fit_svr(pool[mask], goals[mask], params)
                    score += float(np.mean(np.abs(
                        model.predict(pool[fold]) - goals[fold])))
        except SolverNotConverged:
            continue
        score /= len(folds)
        if score < best_score:
            best_score, best_params = score, params
    if best_params is None:
        raise SolverNotConverged("no hyperparameter trial converged")
    # the final fit may be much larger than the search pool; let it grind
    final = replace(best_params, max_iter=max(200_000, 200 * n))
    return fit_svr(std_features, targets, final), best_score


def train_svr(samples, scheme: MetricScheme, search_budget: int = 60,
              seed: int = 0, tol: float = 1e-3,
              metadata: dict | None = None,
              search_subset: int | None = None) -> FingerprintModel:
    """Fit the two coordinate regressors with tuned hyperparameters.

    ``samples`` is an iterable of (feature vector, position) pairs;
    ``search_budget`` counts hyperparameter trials per coordinate.
    Features are standardized internally from training statistics.
    ``search_subset`` caps the number of samples the cross-validated
    search sees (the final fit always uses all of them), keeping the
    tuning cost bounded on dense training grids.
    """
    if search_budget < 1:
        raise ValueError("search_budget must be positive")
    if search_subset is not None and search_subset < 10:
        raise ValueError("search_subset must allow at least 10 samples")
    features, positions = _stack_samples(samples)
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std == 0.0] = 1.0
    standardized = (features - mean) / std

    rng = np.random.default_rng(seed)
    search_index = None
    if search_subset is not None and len(features) > search_subset:
        search_index = rng.permutation(len(features))[:search_subset]
    model_x, score_x = _search_coordinate(standardized, positions[:, 0],
                                          search_budget, rng, tol,
                                          search_index)
    model_y, score_y = _search_coordinate(standardized, positions[:, 1],
                                          search_budget, rng, tol,
                                          search_index)
    info = dict(metadata or {})
    info.update(
        n_train=len(features),
        cv_mae_x=score_x,
        cv_mae_y=score_y,
        train_mae_x=model_x.train_residual_mae,
        train_mae_y=model_y.train_residual_mae,
    )
    return FingerprintModel(scheme=scheme, feature_mean=mean,
                            feature_std=std, model_x=model_x,
                            model_y=model_y, metadata=info)


def predict(model: FingerprintModel, features) -> tuple[float, float]:
    """Position estimate for one feature vector."""
    out = model.predict(np.asarray(features, dtype=float).ravel())
    return float(out[0]), float(out[1])


def evaluate(model: FingerprintModel, samples) -> ErrorReport:
    """Euclidean-error statistics of the model over labeled samples."""
    features, positions = _stack_samples(samples)
    predicted = model.predict(features)
    errors = np.linalg.norm(predicted - positions, axis=1)
    return ErrorReport.from_errors(errors)


def _svr_block(model: SvrModel) -> dict:
    return {
        "bias": model.bias,
        "n_support": model.n_support,
        "c": model.params.c,
        "epsilon": model.params.epsilon,
        "kernel_scale": model.params.kernel_scale,
        "tol": model.params.tol,
        "iterations": model.iterations,
        "kkt_gap": model.kkt_gap,
        "train_residual_mae": model.train_residual_mae,
    }


def save_model(model: FingerprintModel, stem) -> None:
    """Write ``<stem>.json`` (metadata) and ``<stem>.bin`` (vectors).

    The binary block holds, for x then y: the support vectors row-major
    then the dual coefficients, all little-endian float64.
    """
    stem = Path(stem)
    header = {
        "format": FORMAT_TAG,
        "scheme": model.scheme.label,
        "n_features": model.n_features,
        "feature_mean": model.feature_mean.tolist(),
        "feature_std": model.feature_std.tolist(),
        "x": _svr_block(model.model_x),
        "y": _svr_block(model.model_y),
        "metadata": model.metadata,
    }
    blob = b"".join(
        np.ascontiguousarray(part, dtype="<f8").tobytes()
        for sub in (model.model_x, model.model_y)
        for part in (sub.support_vectors, sub.coefficients))
    stem.with_suffix(".json").write_text(
        json.dumps(header, sort_keys=True, indent=2) + "\n")
    stem.with_suffix(".bin").write_bytes(blob)


def _read_svr(block: dict, raw: memoryview, offset: int, n_features: int):
    params = SvrParams(c=block["c"], epsilon=block["epsilon"],
                       kernel_scale=block["kernel_scale"], tol=block["tol"])
    n_sv = int(block["n_support"])
    sv_bytes = n_sv * n_features * 8
    vectors = np.frombuffer(raw[offset:offset + sv_bytes],
                            dtype="<f8").reshape(n_sv, n_features)
    offset += sv_bytes
    coefs = np.frombuffer(raw[offset:offset + n_sv * 8], dtype="<f8")
    offset += n_sv * 8
    model = SvrModel(vectors.copy(), coefs.copy(), block["bias"], params,
                     iterations=block.get("iterations", 0),
                     kkt_gap=block.get("kkt_gap", 0.0),
                     train_residual_mae=block.get("train_residual_mae", 0.0))
    return model, offset


def load_model(stem) -> FingerprintModel:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported model format {header.get('format')!r}")
    raw = memoryview(stem.with_suffix(".bin").read_bytes())
    n_features = int(header["n_features"])
    model_x, offset = _read_svr(header["x"], raw, 0, n_features)
    model_y, offset = _read_svr(header["y"], raw, offset, n_features)
    if offset != len(raw):
        raise ValueError("binary block length mismatch")
    return FingerprintModel(
        scheme=MetricScheme.from_label(header["scheme"]),
        feature_mean=np.asarray(header["feature_mean"], dtype=float),
        feature_std=np.asarray(header["feature_std"], dtype=float),
        model_x=model_x,
        model_y=model_y,
        metadata=header.get("metadata", {}),
    )
