"""Synthetic indoor propagation scenes.

A scene is a rectangular service area with the user terminal at a fixed
height, plus a handful of fixed point scatterers.  CSI is synthesized
from exact spherical wavefronts per element (no plane-wave shortcut), so
nearby transmitters show the sub-array-dependent bearings a real large
aperture sees.  Amplitudes follow free-space path loss; a scatterer
bounce applies its reflectivity on top of the loss over the full detour.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import CsiMatrix
from .geometry import C_LIGHT, ArrayTopology


@dataclass(frozen=True)
class SceneArea:
    """Service rectangle with the centered fingerprint patch inside it."""

    width: float = 3.0
    depth: float = 3.0
    grid_span: float = 1.25
    ue_height: float = 0.4

    def __post_init__(self):
        if self.width <= 0 or self.depth <= 0:
            raise ValueError("area dimensions must be positive")
        if not 0 < self.grid_span <= min(self.width, self.depth):
            raise ValueError("fingerprint patch must fit inside the area")

    @property
    def grid_origin(self) -> np.ndarray:
        return np.array([(self.width - self.grid_span) / 2.0,
                         (self.depth - self.grid_span) / 2.0])

    def contains(self, xy) -> bool:
        x, y = float(xy[0]), float(xy[1])
        return 0.0 <= x <= self.width and 0.0 <= y <= self.depth


@dataclass(frozen=True)
class Scatterer:
    """Point reflector: position in meters, amplitude reflectivity."""

    position: tuple[float, float, float]
    reflectivity: float

    def __post_init__(self):
        if not 0 < self.reflectivity < 1:
            raise ValueError("reflectivity must be in (0, 1)")


@dataclass(frozen=True)
class Scene:
    """Area plus scatterer layout; ``gain`` scales every amplitude."""

    area: SceneArea = field(default_factory=SceneArea)
    scatterers: tuple[Scatterer, ...] = ()
    gain: float = 1.0

    def ue_point(self, xy) -> np.ndarray:
        return np.array([float(xy[0]), float(xy[1]), self.area.ue_height])


def default_scene(area: SceneArea | None = None) -> Scene:
    """LoS-dominated room: five wall-adjacent reflectors, short detours."""
    area = area or SceneArea()
    scatterers = (
        Scatterer((0.22 * area.width, 0.92 * area.depth, 1.25), 0.60),
        Scatterer((0.90 * area.width, 0.78 * area.depth, 1.05), 0.55),
        Scatterer((0.55 * area.width, 0.10 * area.depth, 1.60), 0.50),
        Scatterer((0.15 * area.width, 0.35 * area.depth, 0.55), 0.50),
        Scatterer((0.78 * area.width, 0.25 * area.depth, 1.70), 0.45),
    )
    return Scene(area=area, scatterers=scatterers)


def _spherical(elements, source, frequencies, amplitudes,
               extra_path: float = 0.0):
    r = np.linalg.norm(elements - source, axis=1) + extra_path
    phase = np.exp(-2j * np.pi * np.outer(r, frequencies) / C_LIGHT)
    return amplitudes(r)[:, None] * phase


def scene_csi(topo: ArrayTopology, scene: Scene, ue_xy,
              frequencies) -> CsiMatrix:
    """Exact multipath CSI of the full topology for a terminal at ue_xy."""
    if not scene.area.contains(ue_xy):
        raise ValueError(f"terminal {tuple(ue_xy)} outside the scene area")
    frequencies = np.asarray(frequencies, dtype=float)
    elements = topo.element_positions
    ue = scene.ue_point(ue_xy)
    loss = topo.carrier_wavelength / (4.0 * np.pi)

    def free_space(r):
        return scene.gain * loss / r

    values = _spherical(elements, ue, frequencies, free_space)
    for scatterer in scene.scatterers:
        spot = np.asarray(scatterer.position, dtype=float)
        approach = float(np.linalg.norm(spot - ue))

        def bounced(r, rho=scatterer.reflectivity):
            return scene.gain * rho * loss / r

        values = values + _spherical(elements, spot, frequencies, bounced,
                                     extra_path=approach)
    return CsiMatrix(values, frequencies)


def los_delays(topo: ArrayTopology, scene: Scene, ue_xy) -> np.ndarray:
    """Per-element direct-path delays in seconds (ground-truth hook)."""
    ue = scene.ue_point(ue_xy)
    return np.linalg.norm(topo.element_positions - ue, axis=1) / C_LIGHT
