"""Antenna array geometry: topologies, steering vectors, far-field bounds,
and sliding-window sub-array partitioning.

World frame is (x, y) on the floor plane with z pointing up, all in meters.
Each panel (a contiguous planar block of elements) carries a local frame:
``axis_u`` along the element rows (horizontal), ``axis_v`` along the columns
(vertical for wall-mounted arrays), and ``boresight`` normal to the panel,
pointing into the scene.  Arrival directions are expressed in that local
frame as (azimuth, elevation) with unit vector

    omega = [sin(az)*cos(el), sin(el), cos(az)*cos(el)]

in (axis_u, axis_v, boresight) components, so a linear array along axis_u
sees the classic exp(-j*2*pi*d/lambda*(m-1)*sin(az)) phase ramp.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.constants import speed_of_light as C_LIGHT


class ArrayKind(str, Enum):
    ULA = "ULA"
    DIS = "DIS"
    URA = "URA"


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length axis vector")
    return v / n


@dataclass(frozen=True)
class Panel:
    """One contiguous planar block of elements with its local frame."""

    origin: np.ndarray          # (3,) position of the first element
    axis_u: np.ndarray          # unit vector along rows
    axis_v: np.ndarray          # unit vector along columns
    boresight: np.ndarray       # unit normal into the scene
    shape: tuple[int, int]      # (n_u, n_v); a 1-D panel is (n, 1)
    element_indices: np.ndarray  # flat indices into the parent ordering


@dataclass(frozen=True)
class Direction:
    """Arrival direction in a panel's local frame.

    ``elevation=None`` marks the in-plane direction measured by a 1-D array
    (no elevation information); it behaves as elevation 0.
    """

    azimuth: float
    elevation: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.azimuth) or abs(self.azimuth) > math.pi:
            raise ValueError(f"azimuth {self.azimuth} outside [-pi, pi]")
        if self.elevation is not None and abs(self.elevation) > math.pi / 2 + 1e-12:
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")

    @property
    def unit_vector(self) -> np.ndarray:
        """(u, v, boresight) components; unit norm by construction."""
        el = 0.0 if self.elevation is None else self.elevation
        return np.array([
            math.sin(self.azimuth) * math.cos(el),
            math.sin(el),
            math.cos(self.azimuth) * math.cos(el),
        ])


@dataclass(frozen=True)
class ArrayTopology:
    """Immutable antenna-array description.

    ``element_positions`` follows the CSI antenna ordering: within a panel
    rows run along axis_u, columns along axis_v; DIS panels are concatenated
    in panel order.
    """

    kind: ArrayKind
    element_positions: np.ndarray        # (N, 3)
    element_spacing: float               # d, meters
    carrier_wavelength: float            # lambda, meters
    panels: tuple[Panel, ...]
    carrier_frequency: float = field(default=0.0)

    def __post_init__(self):
        if self.carrier_wavelength <= 0:
            raise ValueError("carrier wavelength must be positive")
        if self.element_spacing <= 0:
            raise ValueError("element spacing must be positive")
        self._check_uniform_spacing()

    def _check_uniform_spacing(self):
        for panel in self.panels:
            pos = self.element_positions[panel.element_indices]
            n_u, n_v = panel.shape
            grid = pos.reshape(n_v, n_u, 3)
            for diffs in (np.diff(grid, axis=1), np.diff(grid, axis=0)):
                if diffs.size:
                    steps = np.linalg.norm(diffs, axis=-1)
                    if np.any(np.abs(steps - self.element_spacing) > 1e-9):
                        raise ValueError("element spacing is not uniform within panel")

    @property
    def n_elements(self) -> int:
        return self.element_positions.shape[0]

    def panel_of(self, element_index: int) -> Panel:
        for panel in self.panels:
            if element_index in panel.element_indices:
                return panel
        raise IndexError(f"element {element_index} not in any panel")


@dataclass(frozen=True)
class SubArray:
    """A sliding-window selection of contiguous elements within one panel."""

    parent: ArrayTopology
    element_indices: np.ndarray   # flat, ordered like the parent
    panel_index: int
    window: tuple[int, int]       # (w_u, w_v)

    @property
    def n_elements(self) -> int:
        return len(self.element_indices)

    @property
    def panel(self) -> Panel:
        return self.parent.panels[self.panel_index]

    @property
    def positions(self) -> np.ndarray:
        return self.parent.element_positions[self.element_indices]

    @property
    def aperture(self) -> float:
        """D = (elements along the longest window dimension) * spacing."""
        return max(self.window) * self.parent.element_spacing

    @property
    def phase_center(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    @property
    def is_planar(self) -> bool:
        return min(self.window) > 1

    def local_uv(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane element coordinates relative to the first element."""
        rel = self.positions - self.positions[0]
        return rel @ self.panel.axis_u, rel @ self.panel.axis_v


def steering_vector(sub: SubArray, direction: Direction) -> np.ndarray:
    """Plane-wave array response of ``sub`` for ``direction``.

    Every entry has unit magnitude; the first element has zero phase.  For a
    1-D sub-array with element step d this reduces to
    exp(-j*2*pi*d/lambda*(m-1)*sin(azimuth)).
    """
    if sub.n_elements == 0:
        raise ValueError("empty sub-array")
    u, v = sub.local_uv()
    omega = direction.unit_vector
    lam = sub.parent.carrier_wavelength
    phase = (-2.0 * np.pi / lam) * (u * omega[0] + v * omega[1])
    return np.exp(1j * phase)


def rayleigh_distance(aperture: float, wavelength: float) -> float:
    """Far-field boundary 2*D^2/lambda for an aperture of size D."""
    if wavelength <= 0:
        raise ValueError("wavelength must be positive")
    if aperture < 0:
        raise ValueError("aperture must be non-negative")
    return 2.0 * aperture * aperture / wavelength


def partition_sliding(topo: ArrayTopology, window, stride=1) -> list[SubArray]:
    """Slide a window over every panel and return the sub-arrays in order.

    ``window`` is an element count for 1-D panels or (w_u, w_v) for planar
    ones; ``stride`` likewise.  Windows never straddle panel boundaries, so
    for a DIS topology each panel is partitioned independently.
    """
    w_u, w_v = _as_pair(window)
    s_u, s_v = _as_pair(stride)
    if min(w_u, w_v) < 1 or min(s_u, s_v) < 1:
        raise ValueError("window and stride must be positive")

    subs = []
    for p_idx, panel in enumerate(topo.panels):
        n_u, n_v = panel.shape
        if w_u > n_u or w_v > n_v:
            raise ValueError(
                f"window {w_u}x{w_v} does not fit panel {p_idx} of {n_u}x{n_v}")
        flat = np.asarray(panel.element_indices).reshape(n_v, n_u)
        for j0 in range(0, n_v - w_v + 1, s_v):
            for i0 in range(0, n_u - w_u + 1, s_u):
                block = flat[j0:j0 + w_v, i0:i0 + w_u]
                subs.append(SubArray(
                    parent=topo,
                    element_indices=block.reshape(-1).copy(),
                    panel_index=p_idx,
                    window=(w_u, w_v),
                ))
    return subs


def _as_pair(x):
    if np.isscalar(x):
        return int(x), 1
    a, b = x
    return int(a), int(b)


def _panel_frame(orientation: float):
    """Local frame for a wall-mounted panel whose boresight yaw is
    ``orientation`` (radians, world frame, measured from +x)."""
    boresight = np.array([math.cos(orientation), math.sin(orientation), 0.0])
    axis_v = np.array([0.0, 0.0, 1.0])
    axis_u = np.cross(axis_v, boresight)   # right-handed: u x v = boresight
    return axis_u, axis_v, boresight


def _grid_positions(origin, axis_u, axis_v, shape, spacing):
    n_u, n_v = shape
    iu, iv = np.meshgrid(np.arange(n_u), np.arange(n_v))
    return (np.asarray(origin, float)
            + iu.reshape(-1, 1) * spacing * axis_u
            + iv.reshape(-1, 1) * spacing * axis_v)


def ula_topology(n=64, spacing=0.07, carrier_frequency=2.61e9,
                 origin=(0.0, 0.0, 1.0), orientation=math.pi / 2) -> ArrayTopology:
    """Uniform linear array of ``n`` elements along the panel's axis_u."""
    axis_u, axis_v, boresight = _panel_frame(orientation)
    positions = _grid_positions(origin, axis_u, axis_v, (n, 1), spacing)
    panel = Panel(np.asarray(origin, float), axis_u, axis_v, boresight,
                  (n, 1), np.arange(n))
    return ArrayTopology(ArrayKind.ULA, positions, spacing,
                         C_LIGHT / carrier_frequency, (panel,),
                         carrier_frequency)


def ura_topology(shape=(8, 8), spacing=0.07, carrier_frequency=2.61e9,
                 origin=(0.0, 0.0, 0.79), orientation=math.pi / 2) -> ArrayTopology:
    """Uniform rectangular array, rows horizontal and columns vertical."""
    n_u, n_v = shape
    axis_u, axis_v, boresight = _panel_frame(orientation)
    positions = _grid_positions(origin, axis_u, axis_v, (n_u, n_v), spacing)
    panel = Panel(np.asarray(origin, float), axis_u, axis_v, boresight,
                  (n_u, n_v), np.arange(n_u * n_v))
    return ArrayTopology(ArrayKind.URA, positions, spacing,
                         C_LIGHT / carrier_frequency, (panel,),
                         carrier_frequency)


def dis_topology(panel_poses, panel_size=8, spacing=0.07,
                 carrier_frequency=2.61e9) -> ArrayTopology:
    """Distributed set of 1-D panels.

    ``panel_poses`` is a sequence of (origin, orientation) pairs, one per
    panel, in CSI antenna order.
    """
    if not panel_poses:
        raise ValueError("at least one panel required")
    positions = []
    panels = []
    offset = 0
    for origin, orientation in panel_poses:
        axis_u, axis_v, boresight = _panel_frame(orientation)
        positions.append(_grid_positions(origin, axis_u, axis_v,
                                         (panel_size, 1), spacing))
        panels.append(Panel(np.asarray(origin, float), axis_u, axis_v,
                            boresight, (panel_size, 1),
                            np.arange(offset, offset + panel_size)))
        offset += panel_size
    return ArrayTopology(ArrayKind.DIS, np.vstack(positions), spacing,
                         C_LIGHT / carrier_frequency, tuple(panels),
                         carrier_frequency)


def topology_from_json(source) -> ArrayTopology:
    """Build a topology from a JSON descriptor (dict, JSON string, or path).

    Keys: kind, count (int or [n_u, n_v]), spacing, carrier_frequency,
    origin, orientation; DIS adds panels: [{origin, orientation}, ...] and
    panel_size.
    """
    if isinstance(source, dict):
        desc = source
    else:
        text = str(source)
        if text.lstrip().startswith("{"):
            desc = json.loads(text)
        else:
            with open(text) as fh:
                desc = json.load(fh)

    kind = ArrayKind(desc["kind"].upper())
    spacing = float(desc.get("spacing", 0.07))
    fc = float(desc.get("carrier_frequency", 2.61e9))
    if kind is ArrayKind.ULA:
        return ula_topology(int(desc["count"]), spacing, fc,
                            tuple(desc.get("origin", (0.0, 0.0, 1.0))),
                            float(desc.get("orientation", math.pi / 2)))
    if kind is ArrayKind.URA:
        n_u, n_v = desc["count"]
        return ura_topology((int(n_u), int(n_v)), spacing, fc,
                            tuple(desc.get("origin", (0.0, 0.0, 0.79))),
                            float(desc.get("orientation", math.pi / 2)))
    poses = [(tuple(p["origin"]), float(p["orientation"]))
             for p in desc["panels"]]
    return dis_topology(poses, int(desc.get("panel_size", 8)), spacing, fc)


def topology_to_json(topo: ArrayTopology) -> dict:
    """Inverse of :func:`topology_from_json` for the supported layouts."""
    first = topo.panels[0]
    orientation = math.atan2(first.boresight[1], first.boresight[0])
    if topo.kind is ArrayKind.ULA:
        return {"kind": "ula", "count": topo.n_elements,
                "spacing": topo.element_spacing,
                "carrier_frequency": topo.carrier_frequency,
                "origin": [float(x) for x in first.origin],
                "orientation": orientation}
    if topo.kind is ArrayKind.URA:
        return {"kind": "ura", "count": list(first.shape),
                "spacing": topo.element_spacing,
                "carrier_frequency": topo.carrier_frequency,
                "origin": [float(x) for x in first.origin],
                "orientation": orientation}
    return {"kind": "dis",
            "panel_size": topo.panels[0].shape[0],
            "spacing": topo.element_spacing,
            "carrier_frequency": topo.carrier_frequency,
            "panels": [{"origin": [float(x) for x in p.origin],
                        "orientation": math.atan2(p.boresight[1], p.boresight[0])}
                       for p in topo.panels]}


def subset_antennas(topo: ArrayTopology, n: int) -> ArrayTopology:
    """Restrict a topology to its first ``n`` antennas (CSI ordering).

    ULA/DIS truncate along the element order; URA requires a square count
    and keeps the k x k corner block.
    """
    if n < 1 or n > topo.n_elements:
        raise ValueError(f"cannot select {n} of {topo.n_elements} antennas")
    if n == topo.n_elements:
        return topo
    fc = topo.carrier_frequency
    if topo.kind is ArrayKind.ULA:
        first = topo.panels[0]
        orientation = math.atan2(first.boresight[1], first.boresight[0])
        return ula_topology(n, topo.element_spacing, fc,
                            tuple(first.origin), orientation)
    if topo.kind is ArrayKind.URA:
        k = math.isqrt(n)
        if k * k != n:
            raise ValueError("URA antenna subsets must be square counts")
        first = topo.panels[0]
        orientation = math.atan2(first.boresight[1], first.boresight[0])
        return ura_topology((k, k), topo.element_spacing, fc,
                            tuple(first.origin), orientation)
    panel_size = topo.panels[0].shape[0]
    if n % panel_size:
        raise ValueError(f"DIS subsets must be multiples of {panel_size}")
    poses = [(tuple(p.origin), math.atan2(p.boresight[1], p.boresight[0]))
             for p in topo.panels[: n // panel_size]]
    return dis_topology(poses, panel_size, topo.element_spacing, fc)


def los_direction(sub: SubArray, position) -> Direction:
    """Direction label of a point source at ``position`` seen from ``sub``.

    A source radiates exp(-j*2*pi*f*r_m/c) across the elements; the
    steering model reproduces those phases at azimuth asin(-u_hat.axis_u),
    so local angles increase toward the negative in-plane axes.  This is
    the label an estimator matching against :func:`steering_vector`
    produces, and what this function returns.  For 1-D sub-arrays the
    azimuth is the resolvable cone angle and elevation is None.
    """
    u = np.asarray(position, float) - sub.phase_center
    u = u / np.linalg.norm(u)
    panel = sub.panel
    comp_u = float(u @ panel.axis_u)
    comp_v = float(u @ panel.axis_v)
    comp_b = float(u @ panel.boresight)
    if sub.is_planar:
        return Direction(math.atan2(-comp_u, comp_b),
                         math.asin(np.clip(-comp_v, -1.0, 1.0)))
    return Direction(math.asin(np.clip(-comp_u, -1.0, 1.0)), None)


def direction_to_world(sub: SubArray, direction: Direction) -> np.ndarray:
    """World-frame unit vector from the sub-array toward a source whose
    steering-model label is ``direction``; inverse of :func:`los_direction`
    up to range."""
    el = 0.0 if direction.elevation is None else direction.elevation
    panel = sub.panel
    return (-math.sin(direction.azimuth) * math.cos(el) * panel.axis_u
            - math.sin(el) * panel.axis_v
            + math.cos(direction.azimuth) * math.cos(el) * panel.boresight)
