"""Config-driven experiment runner.

A single TOML file describes topology, scene, channel, extraction,
training, and output; :func:`run_pipeline` executes the stage chain
generate -> calibrate -> extract -> train -> evaluate and emits CSV
tables, CDF files, multipath dumps, model files, and a manifest hashing
every artifact.  :func:`sweep` repeats the pipeline along one axis.

Everything written to disk is deterministic for a fixed config and
seed: floats are formatted with %.12g, JSON keys are sorted, and no
timestamps appear anywhere.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:      # Python 3.10
    import tomli as tomllib

from . import __version__
from .baselines import (
    AnchorObservation,
    amp_to_range,
    fit_path_loss,
    triangulate_aoa,
    trilaterate,
)
from .calibration import apply_calibration, calibrate_from_reference
from .channel import CsiMatrix, ImpairmentParams, subcarrier_grid
from .datasets import (
    generate_grid_dataset,
    generate_random_dataset,
    load_dataset,
    save_dataset,
)
from .fingerprint import (
    ErrorReport,
    MetricScheme,
    build_features,
    evaluate,
    save_model,
    train_svr,
)
from .geometry import (
    C_LIGHT,
    partition_sliding,
    subset_antennas,
    topology_from_json,
    topology_to_json,
)
from .sage import (
    NoLineOfSight,
    NoPathSignal,
    SageConfig,
    _Workspace,
    sage_extract,
    select_los,
    write_mpc_csv,
)
from .scenes import Scatterer, Scene, SceneArea

STAGES = ("generate", "calibrate", "extract", "train", "evaluate")
SWEEP_AXES = ("antennas", "grid_size", "snr", "scheme", "topology")

# eight 8-element panels on the walls of the 3 x 3 m area, boresights
# inward; element rows start at the origin and run along the panel's
# u axis, so the origins below center each panel at 1/3 or 2/3 of a wall
_DIS_PANELS = [
    {"origin": [1.245, 0.0, 1.0], "orientation": math.pi / 2},
    {"origin": [2.245, 0.0, 1.0], "orientation": math.pi / 2},
    {"origin": [0.755, 3.0, 1.0], "orientation": -math.pi / 2},
    {"origin": [1.755, 3.0, 1.0], "orientation": -math.pi / 2},
    {"origin": [0.0, 0.755, 1.0], "orientation": 0.0},
    {"origin": [0.0, 1.755, 1.0], "orientation": 0.0},
    {"origin": [3.0, 1.245, 1.0], "orientation": math.pi},
    {"origin": [3.0, 2.245, 1.0], "orientation": math.pi},
]

PRESET_TOPOLOGIES = {
    "dis": {"kind": "dis", "panel_size": 8, "spacing": 0.07,
            "carrier_frequency": 2.61e9, "panels": _DIS_PANELS},
    "ula": {"kind": "ula", "count": 64, "spacing": 0.07,
            "carrier_frequency": 2.61e9, "origin": [3.705, 0.0, 1.0],
            "orientation": math.pi / 2},
    "ura": {"kind": "ura", "count": [8, 8], "spacing": 0.07,
            "carrier_frequency": 2.61e9, "origin": [1.745, 0.0, 0.79],
            "orientation": math.pi / 2},
}

DEFAULTS = {
    "topology": PRESET_TOPOLOGIES["dis"],
    "scene": {
        "width": 3.0, "depth": 3.0, "grid_span": 1.25, "ue_height": 0.4,
        "gain": 1.0,
        "scatterers": [
            {"position": [0.66, 2.76, 1.25], "reflectivity": 0.60},
            {"position": [2.70, 2.34, 1.05], "reflectivity": 0.55},
            {"position": [1.65, 0.30, 1.60], "reflectivity": 0.50},
            {"position": [0.45, 1.05, 0.55], "reflectivity": 0.50},
            {"position": [2.34, 0.75, 1.70], "reflectivity": 0.45},
        ],
    },
    "channel": {
        "subcarriers": 100, "bandwidth": 20e6, "snr_db": None,
        "impairments": {
            "sfo_slope": 0.0, "k_sto": 0, "iq_gain_mismatch": 0.0,
            "iq_phase_mismatch": 0.0, "iq_time_offset": 0.0,
            "common_phase": 0.0, "noise_std": 0.0,
            "antenna_offsets": [], "antenna_offset_seed": None,
        },
    },
    "sampling": {"train_grid": 11, "test_samples": 40, "seed": 0},
    # delay_span_ns bounds the coarse delay search; it must exceed the
    # longest path delay in the scene (150 ns = 45 m of travel, ample for
    # room-scale setups).  Zero means the full unambiguous range.
    "extraction": {"window": 8, "stride": 8, "max_paths": 6,
                   "stop_dynamic_range": 30.0, "em_cycles": 5,
                   "peak_interp": True, "los_window_db": 6.0,
                   "delay_span_ns": 150.0},
    "fingerprint": {"schemes": ["amp+aoa+tof"], "search_budget": 40,
                    "tol": 1e-3, "search_subset": 250},
    "calibration": {"enabled": False, "min_samples": 64,
                    "min_resultant": 0.2},
    "baselines": {"enabled": False, "path_loss_exponent": 2.0,
                  "reference_range": 0.5},
    "data": {"train": "", "test": ""},
    "sweep": {"axis": "", "values": []},
    "output": {"directory": "runs/out", "save_datasets": False,
               "save_models": True},
}


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and sample index."""

    def __init__(self, stage, detail, sample=None):
        self.stage = stage
        self.detail = detail
        self.sample = sample
        where = f"[{stage}]"
        if sample is not None:
            where += f" sample {sample}"
        super().__init__(f"{where} {detail}")


def _merge(base, extra, path=""):
    for key, value in extra.items():
        if key not in base:
            raise ValueError(f"unknown config key {path + key!r}")
        if key == "topology" and not path:
            base[key] = copy.deepcopy(value)   # descriptor replaces wholesale
        elif isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, path + key + ".")
        else:
            base[key] = copy.deepcopy(value)


class ExperimentConfig:
    """Fully resolved experiment description with defaults filled in.

    ``overrides`` is merged into the documented defaults; unknown keys
    are rejected.  The topology section is a descriptor and replaces the
    default wholesale instead of merging key by key; a preset name
    ("ula", "ura", "dis") stands in for the full descriptor.
    """

    def __init__(self, overrides: dict | None = None):
        resolved = copy.deepcopy(DEFAULTS)
        _merge(resolved, overrides or {})
        if isinstance(resolved["topology"], str):
            name = resolved["topology"]
            if name not in PRESET_TOPOLOGIES:
                raise ValueError(f"unknown topology preset {name!r}")
            resolved["topology"] = copy.deepcopy(PRESET_TOPOLOGIES[name])
        self.resolved = resolved
        self._validate()

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        with open(path, "rb") as stream:
            return cls(tomllib.load(stream))

    @classmethod
    def load(cls, source) -> "ExperimentConfig":
        if isinstance(source, ExperimentConfig):
            return source
        if isinstance(source, dict):
            return cls(source)
        return cls.from_toml(source)

    def _validate(self):
        r = self.resolved
        if r["topology"].get("kind") not in ("ula", "ura", "dis"):
            raise ValueError("topology.kind must be ula, ura, or dis")
        if r["sampling"]["train_grid"] < 2 or r["sampling"]["train_grid"] > 64:
            raise ValueError("sampling.train_grid must be in 2..64")
        if r["sampling"]["test_samples"] < 1:
            raise ValueError("sampling.test_samples must be positive")
        if int(r["sampling"]["seed"]) < 0:
            raise ValueError("sampling.seed must be non-negative")
        if not r["fingerprint"]["schemes"]:
            raise ValueError("fingerprint.schemes must not be empty")
        for label in r["fingerprint"]["schemes"]:
            MetricScheme.from_label(label)
        imp = r["channel"]["impairments"]
        if imp["antenna_offsets"] and imp["antenna_offset_seed"] is not None:
            raise ValueError("give antenna_offsets or antenna_offset_seed, "
                             "not both")
        if bool(r["data"]["train"]) != bool(r["data"]["test"]):
            raise ValueError("data.train and data.test must be given together")
        if r["channel"]["subcarriers"] < 2 or r["channel"]["bandwidth"] <= 0:
            raise ValueError("channel needs >= 2 subcarriers and bandwidth > 0")
        if r["extraction"]["delay_span_ns"] < 0:
            raise ValueError("extraction.delay_span_ns must be non-negative")

    # -- derived accessors ------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.resolved["sampling"]["seed"])

    @property
    def out_dir(self) -> str:
        return self.resolved["output"]["directory"]

    @property
    def config_hash(self) -> str:
        """Hash of everything that defines the experiment (not its paths)."""
        body = {k: v for k, v in self.resolved.items() if k != "output"}
        text = json.dumps(body, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()

    def make_topology(self):
        return topology_from_json(self.resolved["topology"])

    def make_scene(self) -> Scene:
        s = self.resolved["scene"]
        area = SceneArea(s["width"], s["depth"], s["grid_span"],
                         s["ue_height"])
        scatterers = tuple(Scatterer(tuple(d["position"]), d["reflectivity"])
                           for d in s["scatterers"])
        return Scene(area=area, scatterers=scatterers, gain=s["gain"])

    def frequencies(self) -> np.ndarray:
        c = self.resolved["channel"]
        return subcarrier_grid(self.resolved["topology"]["carrier_frequency"],
                               c["bandwidth"], c["subcarriers"])

    def impairments(self, n_antennas: int) -> ImpairmentParams:
        d = dict(self.resolved["channel"]["impairments"])
        explicit = d.pop("antenna_offsets")
        offset_seed = d.pop("antenna_offset_seed")
        offsets = None
        if offset_seed is not None:
            rng = np.random.default_rng([int(offset_seed), 0xCA1])
            offsets = rng.uniform(-math.pi + 1e-9, math.pi, n_antennas)
        elif explicit:
            offsets = np.asarray(explicit, dtype=float)
        return ImpairmentParams(antenna_offsets=offsets, **d)

    def sage_config(self) -> SageConfig:
        e = self.resolved["extraction"]
        span_ns = e["delay_span_ns"]
        return SageConfig(max_paths=e["max_paths"],
                          stop_dynamic_range=e["stop_dynamic_range"],
                          em_cycles=e["em_cycles"],
                          peak_interp=e["peak_interp"],
                          delay_span=span_ns * 1e-9 if span_ns else None)

    def schemes(self) -> list[MetricScheme]:
        return [MetricScheme.from_label(s)
                for s in self.resolved["fingerprint"]["schemes"]]

    def override(self, seed=None, out_dir=None) -> "ExperimentConfig":
        resolved = copy.deepcopy(self.resolved)
        if seed is not None:
            resolved["sampling"]["seed"] = int(seed)
        if out_dir is not None:
            resolved["output"]["directory"] = str(out_dir)
        return ExperimentConfig(resolved)

    def with_axis(self, axis: str, value) -> "ExperimentConfig":
        """Derived config for one sweep point; invalid values raise."""
        resolved = copy.deepcopy(self.resolved)
        if axis == "antennas":
            topo = subset_antennas(self.make_topology(), int(value))
            resolved["topology"] = topology_to_json(topo)
        elif axis == "grid_size":
            resolved["sampling"]["train_grid"] = int(value)
        elif axis == "snr":
            resolved["channel"]["snr_db"] = float(value)
        elif axis == "scheme":
            MetricScheme.from_label(str(value))
            resolved["fingerprint"]["schemes"] = [str(value)]
        elif axis == "topology":
            if isinstance(value, str):
                if value not in PRESET_TOPOLOGIES:
                    raise ValueError(f"unknown topology preset {value!r}")
                desc = PRESET_TOPOLOGIES[value]
            else:
                desc = dict(value)
            topology_from_json(desc)     # validate before adopting
            resolved["topology"] = copy.deepcopy(desc)
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        return ExperimentConfig(resolved)


@dataclass
class ReportBundle:
    """Everything a pipeline run produced, plus where it lives."""

    out_dir: Path
    config_hash: str
    seed: int
    reports: dict[str, ErrorReport] = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)


class _ArtifactWriter:
    """Writes run outputs and keeps a content hash per file."""

    def __init__(self, root: Path):
        self.root = root
        self.hashes: dict[str, str] = {}

    def write_text(self, name: str, text: str):
        data = text.encode()
        (self.root / name).write_bytes(data)
        self.hashes[name] = hashlib.sha256(data).hexdigest()

    def write_json(self, name: str, obj):
        self.write_text(name, json.dumps(obj, sort_keys=True, indent=2) + "\n")

    def track(self, name: str):
        data = (self.root / name).read_bytes()
        self.hashes[name] = hashlib.sha256(data).hexdigest()


def _fmt(value) -> str:
    return f"{float(value):.12g}"


def _csv_text(header, rows) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _safe_name(label: str) -> str:
    return label.replace(":", "_")


def _amp_db(component) -> float:
    return 20.0 * math.log10(abs(component.amplitude))


def _panel_yaw(sub) -> float:
    b = sub.panel.boresight
    return math.atan2(b[1], b[0])


# -- pipeline stages -------------------------------------------------------


def _stage_generate(cfg, writer, manifest):
    data = cfg.resolved["data"]
    scene = cfg.make_scene()
    if data["train"]:
        train = load_dataset(data["train"])
        test = load_dataset(data["test"])
        topo = train.load_topology()
        manifest["counts"]["ingested"] = True
    else:
        topo = cfg.make_topology()
        freqs = cfg.frequencies()
        imp = cfg.impairments(topo.n_elements)
        snr = cfg.resolved["channel"]["snr_db"]
        seed = cfg.seed
        train = generate_grid_dataset(topo, scene,
                                      cfg.resolved["sampling"]["train_grid"],
                                      imp, snr, seed, freqs)
        test = generate_random_dataset(topo, scene,
                                       cfg.resolved["sampling"]["test_samples"],
                                       imp, snr, seed + 1, freqs)
    if cfg.resolved["output"]["save_datasets"]:
        for name, ds in (("train.csids", train), ("test.csids", test)):
            save_dataset(ds, writer.root / name)
            writer.track(name)
    manifest["counts"]["train"] = len(train)
    manifest["counts"]["test"] = len(test)
    return topo, scene, train, test


def _stage_calibrate(cfg, topo, scene, train, writer):
    c = cfg.resolved["calibration"]
    if not c["enabled"]:
        return None
    measurements = [train.sample(i) for i in range(len(train))]
    anchors = [scene.ue_point(p) for p in train.positions]
    solution = calibrate_from_reference(measurements, anchors, topo,
                                        min_samples=c["min_samples"],
                                        min_resultant=c["min_resultant"])
    writer.write_json("calibration.json", {
        "iq_gain_mismatch": solution.iq_gain_mismatch,
        "iq_time_offset": solution.iq_time_offset,
        "iq_phase_mismatch": solution.iq_phase_mismatch,
        "slope": solution.slope,
        "common_phase": solution.common_phase,
        "antenna_offsets": [float(x) for x in solution.antenna_offsets],
        "fit_residual_rms": solution.fit_residual_rms,
    })
    return solution


def _extract_dataset(name, dataset, subs, sage_cfg, los_window_db, solution,
                     writer):
    los_rows, records = [], []
    spaces = [_Workspace(sub, dataset.frequencies, sage_cfg) for sub in subs]
    for i in range(len(dataset)):
        csi = dataset.sample(i)
        if solution is not None:
            csi = apply_calibration(csi, solution)
        row = []
        for sub_id, sub in enumerate(subs):
            sub_csi = CsiMatrix(csi.values[sub.element_indices],
                                csi.frequencies)
            try:
                components = sage_extract(sub_csi, sub, sage_cfg,
                                          _workspace=spaces[sub_id])
                row.append(select_los(components, los_window_db))
            except (NoPathSignal, NoLineOfSight) as exc:
                raise StageError(
                    "extract", f"{name} sub-array {sub_id}: {exc}",
                    sample=i) from exc
            records.append((i, sub_id, components))
        los_rows.append(row)
    writer.write_text(f"mpc_{name}.csv", write_mpc_csv(records))
    return los_rows


def _stage_train(cfg, subs_count, train_rows, train_positions, writer,
                 bundle):
    fp = cfg.resolved["fingerprint"]
    for scheme in cfg.schemes():
        samples = [(build_features(row, scheme), pos)
                   for row, pos in zip(train_rows, train_positions)]
        model = train_svr(samples, scheme,
                          search_budget=fp["search_budget"], seed=cfg.seed,
                          tol=fp["tol"], search_subset=fp["search_subset"],
                          metadata={"config_hash": cfg.config_hash,
                                    "n_subarrays": subs_count})
        bundle.models[scheme.label] = model
        if cfg.resolved["output"]["save_models"]:
            stem = writer.root / f"model_{scheme.label}"
            save_model(model, stem)
            writer.track(stem.name + ".json")
            writer.track(stem.name + ".bin")


def _report_files(label, estimates, truths, report, writer):
    rows = [(i, _fmt(t[0]), _fmt(t[1]), _fmt(e[0]), _fmt(e[1]),
             _fmt(math.hypot(e[0] - t[0], e[1] - t[1])))
            for i, (e, t) in enumerate(zip(estimates, truths))]
    safe = _safe_name(label)
    writer.write_text(f"predictions_{safe}.csv", _csv_text(
        ("sample_id", "true_x", "true_y", "est_x", "est_y", "error_m"), rows))
    writer.write_text(f"cdf_{safe}.csv", _csv_text(
        ("error_m", "probability"),
        [(_fmt(e), _fmt(p)) for e, p in report.cdf]))


def _fit_amp_model(cfg, scene, subs, train_rows, train_positions):
    amps, ranges = [], []
    for row, pos in zip(train_rows, train_positions):
        ue = scene.ue_point(pos)
        for sub, los in zip(subs, row):
            amps.append(_amp_db(los))
            ranges.append(float(np.linalg.norm(sub.phase_center - ue)))
    b = cfg.resolved["baselines"]
    return fit_path_loss(amps, ranges, exponent=b["path_loss_exponent"],
                         reference_range=b["reference_range"])


def _baseline_observations(subs, row, ue_height, amp_model):
    """Per-anchor observations with the cone-angle correction applied.

    A horizontal 1-D sub-array measures the cone angle, whose sine is
    scaled by the cosine of the source elevation; the elevation estimate
    comes from the ToF range and the known height difference.
    """
    tof_obs, amp_obs = [], []
    for sub, los in zip(subs, row):
        center = sub.phase_center
        dz = ue_height - float(center[2])
        slant = max(C_LIGHT * los.delay, abs(dz) + 1e-9)
        cos_el = math.sqrt(max(1.0 - (dz / slant) ** 2, 1e-12))
        sine = np.clip(math.sin(los.azimuth) / cos_el, -1.0, 1.0)
        aoa = math.asin(sine)
        horizontal = math.sqrt(slant ** 2 - dz ** 2)
        amp = _amp_db(los)
        tof_obs.append(AnchorObservation(
            tuple(center[:2]), _panel_yaw(sub), aoa=aoa,
            range_m=max(horizontal, 1e-9), amp_db=amp))
        slant_amp = amp_to_range(amp, amp_model)
        horizontal_amp = math.sqrt(max(slant_amp ** 2 - dz ** 2, 1e-18))
        amp_obs.append(AnchorObservation(
            tuple(center[:2]), _panel_yaw(sub),
            range_m=max(horizontal_amp, 1e-9)))
    return tof_obs, amp_obs


def _stage_evaluate(cfg, scene, subs, train_rows, train_positions, test_rows,
                    test, writer, bundle):
    table_rows = []
    for label, model in bundle.models.items():
        samples = [(build_features(row, model.scheme), pos)
                   for row, pos in zip(test_rows, test.positions)]
        report = evaluate(model, samples)
        estimator = f"fingerprint:{label}"
        bundle.reports[estimator] = report
        estimates = [model.predict(features) for features, _ in samples]
        _report_files(estimator, estimates, test.positions, report, writer)
        table_rows.append((estimator, report))

    if cfg.resolved["baselines"]["enabled"]:
        amp_model = _fit_amp_model(cfg, scene, subs, train_rows,
                                   train_positions)
        writer.write_json("path_loss.json", {
            "reference_db": amp_model.reference_db,
            "exponent": amp_model.exponent,
            "reference_range": amp_model.reference_range,
        })
        fixes = {"triangulation:aoa": [], "trilateration:tof": [],
                 "trilateration:amp": []}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")   # amp inversions may clamp
            for i, row in enumerate(test_rows):
                try:
                    tof_obs, amp_obs = _baseline_observations(
                        subs, row, scene.area.ue_height, amp_model)
                    fixes["triangulation:aoa"].append(
                        tuple(triangulate_aoa(tof_obs)))
                    fixes["trilateration:tof"].append(
                        tuple(trilaterate(tof_obs)))
                    fixes["trilateration:amp"].append(
                        tuple(trilaterate(amp_obs)))
                except ValueError as exc:
                    raise StageError("evaluate", str(exc), sample=i) from exc
        for estimator, estimates in fixes.items():
            errors = np.linalg.norm(np.asarray(estimates) - test.positions,
                                    axis=1)
            report = ErrorReport.from_errors(errors)
            bundle.reports[estimator] = report
            _report_files(estimator, estimates, test.positions, report,
                          writer)
            table_rows.append((estimator, report))

    writer.write_text("report.csv", _csv_text(
        ("estimator", "mae_m", "median_m", "p90_m", "p95_m"),
        [(label, _fmt(r.mae), _fmt(r.median), _fmt(r.percentile_90),
          _fmt(r.percentile_95)) for label, r in table_rows]))


def run_pipeline(config, until: str | None = None, seed=None,
                 out_dir=None) -> ReportBundle:
    """Execute the pipeline described by ``config`` (path, dict, or
    ExperimentConfig), stopping after stage ``until`` when given.

    Outputs land in the config's output directory; ``seed``/``out_dir``
    override the corresponding config entries.  A stage failure raises
    :class:`StageError`; artifacts written before the failure stay on
    disk and the manifest records the failed stage.
    """
    cfg = ExperimentConfig.load(config)
    if seed is not None or out_dir is not None:
        cfg = cfg.override(seed=seed, out_dir=out_dir)
    if until is not None and until not in STAGES:
        raise ValueError(f"unknown stage {until!r}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    writer = _ArtifactWriter(out)
    manifest = {
        "format": "mimoloc-run/1",
        "package_version": __version__,
        "config": cfg.resolved,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "stages": [],
        "counts": {},
        "warnings": [],
        "files": writer.hashes,
    }
    bundle = ReportBundle(out_dir=out, config_hash=cfg.config_hash,
                          seed=cfg.seed, manifest=manifest)
    try:
        _execute(cfg, until, writer, manifest, bundle)
    except StageError as exc:
        manifest["failed_stage"] = exc.stage
        manifest["error"] = str(exc)
        raise
    finally:
        writer.write_json("manifest.json", manifest)
    return bundle


def _guard(stage, func, *args, **kwargs):
    try:
        return func(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc


def _execute(cfg, until, writer, manifest, bundle):
    topo, scene, train, test = _guard("generate", _stage_generate, cfg,
                                      writer, manifest)
    manifest["stages"].append("generate")
    if until == "generate":
        return

    solution = _guard("calibrate", _stage_calibrate, cfg, topo, scene, train,
                      writer)
    manifest["stages"].append("calibrate")
    if until == "calibrate":
        return

    e = cfg.resolved["extraction"]
    window = e["window"]
    subs = _guard("extract", partition_sliding, topo,
                  tuple(window) if isinstance(window, list) else window,
                  tuple(e["stride"]) if isinstance(e["stride"], list)
                  else e["stride"])
    if not subs:
        raise StageError("extract", "no sub-arrays: window exceeds the array")
    manifest["counts"]["subarrays"] = len(subs)
    sage_cfg = _guard("extract", cfg.sage_config)
    train_rows = _extract_dataset("train", train, subs, sage_cfg,
                                  e["los_window_db"], solution, writer)
    test_rows = _extract_dataset("test", test, subs, sage_cfg,
                                 e["los_window_db"], solution, writer)
    manifest["stages"].append("extract")
    if until == "extract":
        return

    _guard("train", _stage_train, cfg, len(subs), train_rows, train.positions,
           writer, bundle)
    manifest["stages"].append("train")
    if until == "train":
        return

    _guard("evaluate", _stage_evaluate, cfg, scene, subs, train_rows,
           train.positions, test_rows, test, writer, bundle)
    manifest["stages"].append("evaluate")


# -- sweeps ----------------------------------------------------------------


def _slug(value) -> str:
    if isinstance(value, dict):
        return str(value.get("kind", "topology"))
    if isinstance(value, float):
        return _fmt(value)
    text = str(value)
    return "".join(c if c.isalnum() or c in "+._-" else "-" for c in text)


def _coerce(axis, value):
    if axis in ("antennas", "grid_size") and not isinstance(value, dict):
        return int(value)
    if axis == "snr" and not isinstance(value, dict):
        return float(value)
    return value


def sweep(config, axis: str | None = None, values=None, seed=None,
          out_dir=None) -> list[ReportBundle]:
    """Run the pipeline once per axis value under a shared output root.

    ``axis``/``values`` fall back to the config's [sweep] section.  A
    value the axis rejects is skipped with a warning and recorded in the
    sweep manifest; for the antenna and grid axes a non-monotone MAE
    trend is flagged there as well.  Emits summary.csv plus one run
    directory per accepted value.
    """
    cfg = ExperimentConfig.load(config)
    sweep_section = cfg.resolved["sweep"]
    axis = axis or sweep_section["axis"]
    if values is None:
        values = sweep_section["values"]
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}, "
                         f"got {axis!r}")
    if not values:
        raise ValueError("no sweep values given")

    root = Path(out_dir or cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    bundles, skipped, runs, summary_rows = [], [], [], []
    for raw in values:
        label = _slug(raw)
        try:
            point = cfg.with_axis(axis, _coerce(axis, raw))
        except (ValueError, TypeError, KeyError) as exc:
            warnings.warn(f"sweep value {label!r} skipped: {exc}")
            skipped.append({"value": label, "reason": str(exc)})
            continue
        run_dir = root / f"{axis}_{label}"
        bundle = run_pipeline(point, seed=seed, out_dir=run_dir)
        bundles.append(bundle)
        runs.append({"value": label, "directory": run_dir.name,
                     "config_hash": bundle.config_hash})
        for estimator, report in bundle.reports.items():
            summary_rows.append((axis, label, estimator, _fmt(report.mae),
                                 _fmt(report.median),
                                 _fmt(report.percentile_90),
                                 _fmt(report.percentile_95)))

    flags = _trend_flags(axis, bundles, runs)
    writer = _ArtifactWriter(root)
    writer.write_text("summary.csv", _csv_text(
        ("axis", "value", "estimator", "mae_m", "median_m", "p90_m",
         "p95_m"), summary_rows))
    writer.write_json("sweep_manifest.json", {
        "format": "mimoloc-sweep/1",
        "axis": axis,
        "runs": runs,
        "skipped": skipped,
        "warnings": flags,
        "files": writer.hashes,
    })
    return bundles


def _trend_flags(axis, bundles, runs):
    """More antennas or denser grids should not raise the MAE."""
    if axis not in ("antennas", "grid_size") or len(bundles) < 2:
        return []
    flags = []
    estimators = bundles[0].reports.keys()
    for estimator in estimators:
        series = [b.reports[estimator].mae for b in bundles
                  if estimator in b.reports]
        for k in range(1, len(series)):
            if series[k] > series[k - 1]:
                flags.append(
                    f"{estimator}: MAE rose from {_fmt(series[k - 1])} to "
                    f"{_fmt(series[k])} at {axis}={runs[k]['value']}")
    return flags
