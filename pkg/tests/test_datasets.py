import json

import numpy as np
import pytest

from mimoloc.channel import ImpairmentParams, subcarrier_grid
from mimoloc.datasets import (
    FORMAT_TAG,
    LabeledDataset,
    generate_grid_dataset,
    generate_random_dataset,
    grid_positions,
    load_dataset,
    sample_rng_seed,
    save_dataset,
)
from mimoloc.geometry import ula_topology
from mimoloc.scenes import Scene, default_scene, scene_csi

FREQS = subcarrier_grid(count=12)


def topo(n=4):
    return ula_topology(n=n, origin=(1.8, 0.0, 1.0))


class TestGridPositions:
    def test_pitch_and_count(self):
        pts = grid_positions(6, 1.25, (0.875, 0.875))
        assert pts.shape == (36, 2)
        assert pts[1, 0] - pts[0, 0] == pytest.approx(0.25)
        np.testing.assert_allclose(pts[0], [0.875, 0.875])
        np.testing.assert_allclose(pts[-1], [2.125, 2.125])

    def test_two_points_are_corners(self):
        pts = grid_positions(2, 1.0, (0.0, 0.0))
        np.testing.assert_allclose(
            pts, [[0, 0], [1, 0], [0, 1], [1, 1]])

    def test_row_major_order(self):
        pts = grid_positions(3, 1.0, (0.0, 0.0))
        assert pts[1, 1] == pts[0, 1]          # x advances first
        assert pts[3, 1] > pts[0, 1]

    @pytest.mark.parametrize("n,pitch_cm", [(6, 25.0), (11, 12.5),
                                            (26, 5.0), (51, 2.5)])
    def test_standard_densities(self, n, pitch_cm):
        pts = grid_positions(n, 1.25, (0.0, 0.0))
        assert pts[1, 0] * 100 == pytest.approx(pitch_cm)

    def test_needs_two_per_side(self):
        with pytest.raises(ValueError):
            grid_positions(1, 1.25, (0.0, 0.0))


class TestGeneration:
    def test_shapes_and_labels(self):
        ds = generate_grid_dataset(topo(), default_scene(), 3,
                                   frequencies=FREQS)
        assert len(ds) == 9
        assert ds.csi.shape == (9, 4, 12)
        assert ds.csi.dtype == np.complex64
        assert ds.positions.shape == (9, 2)
        assert ds.meta["pitch"] == pytest.approx(1.25 / 2)
        assert ds.load_topology().n_elements == 4

    def test_clean_generation_matches_scene(self):
        scene = default_scene()
        ds = generate_grid_dataset(topo(), scene, 2, frequencies=FREQS)
        for i in range(len(ds)):
            clean = scene_csi(topo(), scene, ds.positions[i], FREQS)
            np.testing.assert_array_equal(
                ds.csi[i], clean.values.astype(np.complex64))

    def test_deterministic_for_fixed_seed(self):
        kw = dict(snr_db=15.0, seed=7, frequencies=FREQS)
        a = generate_grid_dataset(topo(), default_scene(), 3, **kw)
        b = generate_grid_dataset(topo(), default_scene(), 3, **kw)
        np.testing.assert_array_equal(a.csi, b.csi)
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_seed_changes_noise(self):
        a = generate_grid_dataset(topo(), default_scene(), 2, snr_db=15.0,
                                  seed=1, frequencies=FREQS)
        b = generate_grid_dataset(topo(), default_scene(), 2, snr_db=15.0,
                                  seed=2, frequencies=FREQS)
        assert not np.array_equal(a.csi, b.csi)

    def test_samples_differ_within_run(self):
        # per-sample substreams: identical clean CSI still gets fresh noise
        assert sample_rng_seed(3, 5) != sample_rng_seed(3, 6)
        ds = generate_random_dataset(topo(), default_scene(), 2, snr_db=0.0,
                                     seed=0, frequencies=FREQS)
        assert not np.array_equal(ds.csi[0], ds.csi[1])

    def test_snr_target_is_met(self):
        scene = default_scene()
        ds = generate_grid_dataset(topo(), scene, 4, snr_db=10.0, seed=3,
                                   frequencies=FREQS)
        ratios = []
        for i in range(len(ds)):
            clean = scene_csi(topo(), scene, ds.positions[i], FREQS).values
            noise = ds.csi[i].astype(complex) - clean
            ratios.append(np.mean(np.abs(clean) ** 2)
                          / np.mean(np.abs(noise) ** 2))
        assert 10 * np.log10(np.mean(ratios)) == pytest.approx(10.0, abs=1.5)

    def test_impairments_are_applied(self):
        imp = ImpairmentParams(common_phase=0.5)
        scene = default_scene()
        ds = generate_grid_dataset(topo(), scene, 2, impairments=imp,
                                   frequencies=FREQS)
        clean = scene_csi(topo(), scene, ds.positions[0], FREQS).values
        np.testing.assert_allclose(ds.csi[0],
                                   (clean * np.exp(-0.5j)).astype(np.complex64),
                                   rtol=1e-6)

    def test_random_points_stay_on_patch(self):
        ds = generate_random_dataset(topo(), default_scene(), 40,
                                     frequencies=FREQS)
        origin = default_scene().area.grid_origin
        assert np.all(ds.positions >= origin - 1e-12)
        assert np.all(ds.positions <= origin + 1.25 + 1e-12)
        assert ds.meta["kind"] == "random"

    def test_validation(self):
        with pytest.raises(ValueError):
            generate_grid_dataset(topo(), default_scene(), 1,
                                  frequencies=FREQS)
        with pytest.raises(ValueError):
            generate_random_dataset(topo(), default_scene(), 0,
                                    frequencies=FREQS)


class TestLabeledDataset:
    def test_sample_upcasts(self):
        ds = generate_grid_dataset(topo(), default_scene(), 2,
                                   frequencies=FREQS)
        csi = ds.sample(0)
        assert csi.values.dtype == np.complex128
        matrix, xy = ds.labeled(1)
        np.testing.assert_allclose(xy, ds.positions[1])

    def test_shape_validation(self):
        good = generate_grid_dataset(topo(), default_scene(), 2,
                                     frequencies=FREQS)
        with pytest.raises(ValueError):
            LabeledDataset(good.csi, good.positions[:-1], FREQS,
                           good.topology)
        with pytest.raises(ValueError):
            LabeledDataset(good.csi, good.positions, FREQS[:-1],
                           good.topology)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = generate_grid_dataset(topo(), default_scene(), 3, snr_db=20.0,
                                   frequencies=FREQS)
        path = tmp_path / "grid.csids"
        save_dataset(ds, path)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.csi, ds.csi)
        np.testing.assert_array_equal(back.positions, ds.positions)
        np.testing.assert_array_equal(back.frequencies, ds.frequencies)
        assert back.topology == ds.topology
        assert back.meta == ds.meta
        assert back.load_topology().n_elements == 4

    def test_byte_identical_saves(self, tmp_path):
        ds = generate_grid_dataset(topo(), default_scene(), 2, snr_db=20.0,
                                   frequencies=FREQS)
        save_dataset(ds, tmp_path / "a.csids")
        save_dataset(ds, tmp_path / "b.csids")
        save_dataset(load_dataset(tmp_path / "a.csids"), tmp_path / "c.csids")
        blobs = [(tmp_path / n).read_bytes() for n in
                 ("a.csids", "b.csids", "c.csids")]
        assert blobs[0] == blobs[1] == blobs[2]

    def test_ingests_handcrafted_file(self, tmp_path):
        # 1 sample, 2 antennas, 2 subcarriers built byte by byte
        header = {"format": FORMAT_TAG, "n_samples": 1, "n_antennas": 2,
                  "n_subcarriers": 2, "frequencies": [2.6e9, 2.62e9],
                  "topology": {"kind": "ula", "count": 2},
                  "ground_truth": ["x", "y"], "meta": {}}
        csi = np.array([1.0, -1.0, 0.0, 2.0, 3.0, 0.5, -0.25, 4.0],
                       dtype="<f4")
        gt = np.array([1.5, 2.5], dtype="<f8")
        path = tmp_path / "hand.csids"
        path.write_bytes(json.dumps(header).encode() + b"\n"
                         + csi.tobytes() + gt.tobytes())
        ds = load_dataset(path)
        np.testing.assert_allclose(
            ds.csi, [[[1 - 1j, 2j], [3 + 0.5j, -0.25 + 4j]]])
        np.testing.assert_allclose(ds.positions, [[1.5, 2.5]])

    def test_rejects_unknown_format(self, tmp_path):
        path = tmp_path / "bad.csids"
        path.write_bytes(b'{"format": "other/9"}\n')
        with pytest.raises(ValueError, match="format"):
            load_dataset(path)

    def test_rejects_truncated_payload(self, tmp_path):
        ds = generate_grid_dataset(topo(), default_scene(), 2,
                                   frequencies=FREQS)
        path = tmp_path / "cut.csids"
        save_dataset(ds, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError, match="size"):
            load_dataset(path)
