import math

import numpy as np
import pytest

from mimoloc.channel import subcarrier_grid
from mimoloc.geometry import C_LIGHT, ula_topology
from mimoloc.scenes import (
    Scatterer,
    Scene,
    SceneArea,
    default_scene,
    los_delays,
    scene_csi,
)

FREQS = subcarrier_grid(count=16)


def small_topo(n=4):
    # panel on the y=0 wall looking into the room, elements toward -x
    return ula_topology(n=n, origin=(1.8, 0.0, 1.0))


def explicit_los(topo, scene, ue_xy, freqs):
    """Per-entry spherical-wave evaluation with explicit loops."""
    ue = np.array([ue_xy[0], ue_xy[1], scene.area.ue_height])
    lam = topo.carrier_wavelength
    h = np.zeros((topo.n_elements, len(freqs)), dtype=complex)
    for m, elem in enumerate(topo.element_positions):
        r = np.linalg.norm(elem - ue)
        for k, f in enumerate(freqs):
            h[m, k] = (scene.gain * lam / (4 * math.pi * r)
                       * np.exp(-2j * math.pi * f * r / C_LIGHT))
    return h


class TestSceneArea:
    def test_defaults(self):
        area = SceneArea()
        assert area.width == 3.0 and area.depth == 3.0
        assert area.grid_span == 1.25
        np.testing.assert_allclose(area.grid_origin, [0.875, 0.875])

    def test_contains(self):
        area = SceneArea()
        assert area.contains((0.0, 0.0)) and area.contains((3.0, 3.0))
        assert not area.contains((-0.1, 1.0))
        assert not area.contains((1.0, 3.1))

    def test_patch_must_fit(self):
        with pytest.raises(ValueError):
            SceneArea(width=1.0, depth=3.0, grid_span=1.25)

    def test_scatterer_reflectivity_bounds(self):
        with pytest.raises(ValueError):
            Scatterer((1.0, 1.0, 1.0), 0.0)
        with pytest.raises(ValueError):
            Scatterer((1.0, 1.0, 1.0), 1.2)


class TestDefaultScene:
    def test_scatterers_inside_area(self):
        scene = default_scene()
        assert len(scene.scatterers) >= 3
        for s in scene.scatterers:
            assert scene.area.contains(s.position[:2])
            assert 0.0 < s.reflectivity < 1.0

    def test_detours_are_indoor_scale(self):
        # every bounce must arrive after the direct path, within tens of ns
        scene = default_scene()
        topo = small_topo()
        ue = scene.ue_point((1.5, 1.5))
        for s in scene.scatterers:
            spot = np.asarray(s.position)
            for elem in topo.element_positions:
                direct = np.linalg.norm(elem - ue)
                bounced = (np.linalg.norm(spot - ue)
                           + np.linalg.norm(elem - spot))
                detour_ns = (bounced - direct) / C_LIGHT * 1e9
                assert 0.5 < detour_ns < 30.0


class TestSceneCsi:
    def test_outside_area_raises(self):
        with pytest.raises(ValueError):
            scene_csi(small_topo(), default_scene(), (3.5, 1.0), FREQS)

    def test_los_matches_spherical_oracle(self):
        scene = Scene(scatterers=())
        topo = small_topo()
        csi = scene_csi(topo, scene, (1.2, 2.0), FREQS)
        np.testing.assert_allclose(
            csi.values, explicit_los(topo, scene, (1.2, 2.0), FREQS),
            rtol=1e-12)

    def test_bounce_amplitude_and_delay(self):
        area = SceneArea()
        spot = np.array([2.4, 2.2, 1.3])
        scene = Scene(area=area, scatterers=(Scatterer(tuple(spot), 0.4),))
        topo = small_topo()
        ue_xy = (1.1, 1.6)
        bounce = (scene_csi(topo, scene, ue_xy, FREQS).values
                  - scene_csi(topo, Scene(area=area), ue_xy, FREQS).values)
        ue = scene.ue_point(ue_xy)
        lam = topo.carrier_wavelength
        for m, elem in enumerate(topo.element_positions):
            total = (np.linalg.norm(spot - ue)
                     + np.linalg.norm(elem - spot))
            np.testing.assert_allclose(np.abs(bounce[m]),
                                       0.4 * lam / (4 * math.pi * total),
                                       rtol=1e-12)
            # group delay from the phase slope across the narrow grid
            steps = np.angle(bounce[m, 1:] * np.conj(bounce[m, :-1]))
            df = FREQS[1] - FREQS[0]
            np.testing.assert_allclose(-np.mean(steps) / (2 * np.pi * df),
                                       total / C_LIGHT, rtol=1e-9)

    def test_gain_scales_linearly(self):
        topo = small_topo()
        base = scene_csi(topo, Scene(), (1.5, 1.5), FREQS).values
        doubled = scene_csi(topo, Scene(gain=2.0), (1.5, 1.5), FREQS).values
        np.testing.assert_allclose(doubled, 2.0 * base, rtol=1e-12)

    def test_los_delays(self):
        scene = default_scene()
        topo = small_topo()
        delays = los_delays(topo, scene, (2.0, 1.0))
        ue = scene.ue_point((2.0, 1.0))
        expected = [np.linalg.norm(e - ue) / C_LIGHT
                    for e in topo.element_positions]
        np.testing.assert_allclose(delays, expected, rtol=1e-12)
