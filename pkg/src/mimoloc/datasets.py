"""Labeled CSI datasets: grid generation, binary serialization, ingestion.

The on-disk format is one line of JSON (topology descriptor, frequency
grid, sample count, ground-truth columns) followed by the binary payload:
per sample, antenna-major interleaved (real, imag) little-endian float32
CSI values; after all samples, the ground-truth (x, y) pairs as
little-endian float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import (
    CsiMatrix,
    ImpairmentParams,
    apply_impairments,
    noise_std_for_snr,
    subcarrier_grid,
)
from .geometry import ArrayTopology, topology_from_json, topology_to_json
from .scenes import Scene, scene_csi

FORMAT_TAG = "csi-dataset/1"


@dataclass
class LabeledDataset:
    """CSI snapshots with ground-truth 2-D positions."""

    csi: np.ndarray          # (n, antennas, subcarriers) complex64
    positions: np.ndarray    # (n, 2) float64
    frequencies: np.ndarray  # (subcarriers,) float64
    topology: dict           # serialized array descriptor
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.csi = np.asarray(self.csi, dtype=np.complex64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
        if self.csi.ndim != 3:
            raise ValueError("csi must be (samples, antennas, subcarriers)")
        if len(self.positions) != len(self.csi) or self.positions.shape[1] != 2:
            raise ValueError("one (x, y) ground truth per sample required")
        if len(self.frequencies) != self.csi.shape[2]:
            raise ValueError("frequency grid must match the subcarrier count")

    def __len__(self) -> int:
        return len(self.csi)

    def sample(self, index: int) -> CsiMatrix:
        return CsiMatrix(np.asarray(self.csi[index], dtype=complex),
                         self.frequencies)

    def labeled(self, index: int):
        return self.sample(index), tuple(self.positions[index])

    def load_topology(self) -> ArrayTopology:
        return topology_from_json(self.topology)


def grid_positions(n_grid: int, span: float, origin) -> np.ndarray:
    """Row-major (n_grid^2, 2) lattice; pitch is span / (n_grid - 1)."""
    if n_grid < 2:
        raise ValueError("grid needs at least 2 points per side")
    ticks = np.linspace(0.0, span, n_grid)
    gx, gy = np.meshgrid(ticks, ticks, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel()]) + np.asarray(
        origin, dtype=float)


def sample_rng_seed(seed: int, index: int) -> list:
    """Per-sample substream: mix the run seed with the sample index."""
    return [int(seed), int(index)]


def _impair(clean, impairments, snr_db, seed, index):
    imp = impairments or ImpairmentParams()
    if snr_db is not None:
        imp = replace(imp, noise_std=noise_std_for_snr(clean, snr_db))
    return apply_impairments(clean, imp, seed=sample_rng_seed(seed, index))


def generate_grid_dataset(topo: ArrayTopology, scene: Scene, n_grid: int,
                          impairments: ImpairmentParams | None = None,
                          snr_db: float | None = None, seed: int = 0,
                          frequencies=None) -> LabeledDataset:
    """Impaired CSI at every point of the centered fingerprint lattice.

    ``snr_db`` (if given) sets the per-sample noise level against that
    sample's clean CSI power, overriding ``impairments.noise_std``.
    """
    frequencies = (subcarrier_grid() if frequencies is None
                   else np.asarray(frequencies, dtype=float))
    area = scene.area
    points = grid_positions(n_grid, area.grid_span, area.grid_origin)
    return _dataset_at(topo, scene, points, impairments, snr_db, seed,
                       frequencies,
                       meta={"kind": "grid", "n_grid": n_grid,
                             "pitch": area.grid_span / (n_grid - 1)})


def generate_random_dataset(topo: ArrayTopology, scene: Scene, n_samples: int,
                            impairments: ImpairmentParams | None = None,
                            snr_db: float | None = None, seed: int = 0,
                            frequencies=None) -> LabeledDataset:
    """Uniform random terminals over the fingerprint patch (test sets)."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    frequencies = (subcarrier_grid() if frequencies is None
                   else np.asarray(frequencies, dtype=float))
    area = scene.area
    rng = np.random.default_rng([seed, 0x7e57])
    points = area.grid_origin + rng.uniform(
        0.0, area.grid_span, size=(n_samples, 2))
    return _dataset_at(topo, scene, points, impairments, snr_db, seed,
                       frequencies, meta={"kind": "random",
                                          "n_samples": n_samples})


def _dataset_at(topo, scene, points, impairments, snr_db, seed, frequencies,
                meta):
    records = []
    for index, point in enumerate(points):
        clean = scene_csi(topo, scene, point, frequencies)
        records.append(_impair(clean, impairments, snr_db, seed,
                               index).values.astype(np.complex64))
    meta = dict(meta, seed=seed, snr_db=snr_db,
                grid_span=scene.area.grid_span, ue_height=scene.area.ue_height)
    return LabeledDataset(
        csi=np.stack(records),
        positions=np.asarray(points, dtype=float),
        frequencies=frequencies,
        topology=topology_to_json(topo),
        meta=meta,
    )


def save_dataset(dataset: LabeledDataset, path) -> None:
    n, n_ant, n_sub = dataset.csi.shape
    header = {
        "format": FORMAT_TAG,
        "n_samples": n,
        "n_antennas": n_ant,
        "n_subcarriers": n_sub,
        "frequencies": dataset.frequencies.tolist(),
        "topology": dataset.topology,
        "ground_truth": ["x", "y"],
        "meta": dataset.meta,
    }
    interleaved = np.empty((n, n_ant, n_sub, 2), dtype="<f4")
    interleaved[..., 0] = dataset.csi.real
    interleaved[..., 1] = dataset.csi.imag
    with open(path, "wb") as stream:
        stream.write(json.dumps(header, sort_keys=True).encode())
        stream.write(b"\n")
        stream.write(interleaved.tobytes())
        stream.write(np.ascontiguousarray(dataset.positions,
                                          dtype="<f8").tobytes())


def load_dataset(path) -> LabeledDataset:
    """Ingest the binary dataset format (generated or recorded)."""
    with open(path, "rb") as stream:
        header_line = stream.readline()
        payload = stream.read()
    header = json.loads(header_line)
    if header.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported dataset format "
                         f"{header.get('format')!r}")
    n = int(header["n_samples"])
    n_ant = int(header["n_antennas"])
    n_sub = int(header["n_subcarriers"])
    csi_bytes = n * n_ant * n_sub * 2 * 4
    if len(payload) != csi_bytes + n * 16:
        raise ValueError("payload size does not match the header")
    interleaved = np.frombuffer(payload[:csi_bytes], dtype="<f4").reshape(
        n, n_ant, n_sub, 2)
    positions = np.frombuffer(payload[csi_bytes:], dtype="<f8").reshape(n, 2)
    return LabeledDataset(
        csi=(interleaved[..., 0] + 1j * interleaved[..., 1]).astype(
            np.complex64),
        positions=positions.copy(),
        frequencies=np.asarray(header["frequencies"], dtype=float),
        topology=header["topology"],
        meta=header.get("meta", {}),
    )
