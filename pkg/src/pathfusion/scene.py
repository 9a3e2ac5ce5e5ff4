"""Synthetic T-junction street, receiver routes and the path-loss oracle.

Coordinates are meters, z up.  The main street runs along x in
``[0, street_length]`` with y in ``[-w/2, w/2]``; the side street leaves the
north edge at ``junction_x`` and runs to ``w/2 + side_street_length``.
The transmitter stands inside the side street, so receivers on the main
street only see it near the junction or through gaps between buildings.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

SPEED_OF_LIGHT = 299_792_458.0
REF_DISTANCE_M = 1.0
LOS_EXPONENT = 2.1
NLOS_EXPONENT = 3.2
NLOS_EXCESS_DB = 12.0


@dataclass(frozen=True)
class SceneConfig:
    street_width_m: float = 14.0
    street_length_m: float = 375.0
    building_count: int = 5
    carrier_hz: float = 5.9e9
    tx_height_m: float = 1.5
    rx_height_m: float = 2.0
    seed: int = 0
    side_street_length_m: float = 60.0
    tx_setback_m: float = 20.0
    shadowing_sigma_db: float = 2.0
    shadowing_cell_m: float = 10.0

    def digest(self) -> str:
        text = ";".join(f"{k}={getattr(self, k)!r}" for k in self.__dataclass_fields__)
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    albedo: tuple[float, float, float] = (0.6, 0.6, 0.6)


@dataclass(frozen=True)
class Scene:
    street_width: float
    street_length: float
    buildings: tuple[Box, ...]
    tx_pose: tuple[float, float, float]
    carrier_frequency: float
    seed: int
    junction_x: float = 0.0
    side_street_length: float = 0.0
    has_ground: bool = True
    shadowing_sigma_db: float = 2.0
    shadowing_cell_m: float = 10.0

    @property
    def diagonal(self) -> float:
        depth = self.street_width + self.side_street_length
        return math.hypot(self.street_length, depth)

    def box_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.buildings:
            return np.zeros((0, 3)), np.zeros((0, 3))
        lo = np.array([b.lo for b in self.buildings], dtype=np.float64)
        hi = np.array([b.hi for b in self.buildings], dtype=np.float64)
        return lo, hi

    def in_street(self, x: float, y: float) -> bool:
        """Point-in-drivable-area test (main street union side street, closed)."""
        half = self.street_width / 2
        if 0.0 <= x <= self.street_length and -half <= y <= half:
            return True
        return (
            self.side_street_length > 0
            and abs(x - self.junction_x) <= half
            and half <= y <= half + self.side_street_length
        )


@dataclass(frozen=True)
class Route:
    waypoints: tuple[tuple[float, float], ...]
    rx_height: float = 2.0

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ConfigError("route needs at least 2 waypoints")
        for a, b in zip(self.waypoints, self.waypoints[1:]):
            if a == b:
                raise ConfigError(f"route has repeated consecutive waypoint {a}")

    @property
    def segment_lengths(self) -> np.ndarray:
        pts = np.asarray(self.waypoints, dtype=np.float64)
        return np.hypot(*np.diff(pts, axis=0).T)

    @property
    def length(self) -> float:
        return float(self.segment_lengths.sum())

    def point_at(self, s: float) -> tuple[float, float, float]:
        """Planar position and heading (radians) at arc length ``s``."""
        if not 0.0 <= s <= self.length + 1e-9:
            raise DomainError(f"arc position {s} outside route of length {self.length}")
        lengths = self.segment_lengths
        pts = self.waypoints
        for i, seg in enumerate(lengths):
            if s <= seg or i == len(lengths) - 1:
                (x0, y0), (x1, y1) = pts[i], pts[i + 1]
                t = min(s / seg, 1.0)
                return x0 + t * (x1 - x0), y0 + t * (y1 - y0), math.atan2(y1 - y0, x1 - x0)
            s -= seg
        raise AssertionError("unreachable")


@dataclass(frozen=True)
class PathLossLabel:
    pl_db: float
    los: bool
    distance: float


def build_scene(config: SceneConfig) -> Scene:
    """Lay out the street, buildings flush with both edges, and the transmitter."""
    c = config
    for name in ("street_width_m", "street_length_m", "carrier_hz", "side_street_length_m"):
        if not getattr(c, name) > 0:
            raise ConfigError(f"{name} must be positive, got {getattr(c, name)}")
    if c.building_count < 1:
        raise ConfigError(f"building_count must be >= 1, got {c.building_count}")
    if c.tx_height_m <= 0 or c.rx_height_m <= 0:
        raise ConfigError("tx_height_m and rx_height_m must be positive")
    if not 0 < c.tx_setback_m < c.side_street_length_m:
        raise ConfigError("tx_setback_m must lie inside the side street")
    w, L = c.street_width_m, c.street_length_m
    half = w / 2
    jx = L / 2
    if jx - half <= 0:
        raise ConfigError("street_length_m too short for the side street")
    rng = np.random.default_rng([c.seed & 0xFFFFFFFF, 101])

    # edges: (name, x range, side); north edges flank the side street
    edges = [("south", (0.0, L)), ("north_west", (0.0, jx - half)), ("north_east", (jx + half, L))]
    counts = [0, 0, 0]
    for i in range(c.building_count):
        counts[i % 3] += 1

    buildings: list[Box] = []
    for (name, (x0, x1)), k in zip(edges, counts):
        if k == 0:
            continue
        slot = (x1 - x0) / k
        for j in range(k):
            frac = rng.uniform(0.7, 0.95)
            length = slot * frac
            if name == "north_west" and j == k - 1:
                start = x1 - length  # flush with the side street
            elif name == "north_east" and j == 0:
                start = x0
            else:
                start = x0 + j * slot + rng.uniform(0.0, slot - length)
            height = rng.uniform(6.0, 20.0)
            if name == "south":
                depth = rng.uniform(10.0, 25.0)
                lo, hi = (start, -half - depth, 0.0), (start + length, -half, height)
            else:
                depth = rng.uniform(c.tx_setback_m + 5.0, c.tx_setback_m + 25.0)
                lo, hi = (start, half, 0.0), (start + length, half + depth, height)
            albedo = tuple(float(a) for a in rng.uniform(0.3, 0.9, size=3))
            buildings.append(Box(tuple(map(float, lo)), tuple(map(float, hi)), albedo))

    tx = (jx + half - 1.0, half + c.tx_setback_m, c.tx_height_m)
    return Scene(
        street_width=w,
        street_length=L,
        buildings=tuple(buildings),
        tx_pose=tx,
        carrier_frequency=c.carrier_hz,
        seed=c.seed,
        junction_x=jx,
        side_street_length=c.side_street_length_m,
        shadowing_sigma_db=c.shadowing_sigma_db,
        shadowing_cell_m=c.shadowing_cell_m,
    )


def generate_routes(scene: Scene, n: int = 4, seed: int = 0, rx_height: float = 2.0) -> list[Route]:
    """Driving routes along lane offsets of the main street and through the junction.

    The first four are: eastbound along the street, westbound along the
    street, eastbound turning into the side street, and out of the side
    street turning east.  Further routes repeat the pattern on lanes pulled
    toward the centerline by a seeded offset.
    """
    if n < 1:
        raise ConfigError(f"route count must be >= 1, got {n}")
    half = scene.street_width / 2
    L = scene.street_length
    jx = scene.junction_x
    end = scene.side_street_length + half - 2.0
    margin = 5.0
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 202])
    routes = []
    for i in range(n):
        lane = half / 2 if i < 4 else rng.uniform(0.5, half - 1.0)
        kind = i % 4
        if kind == 0:
            pts = [(margin, -lane), (L - margin, -lane)]
        elif kind == 1:
            pts = [(L - margin, lane), (margin, lane)]
        elif kind == 2:
            pts = [(margin, -lane), (jx + lane, -lane), (jx + lane, end)]
        else:
            pts = [(jx - lane, end), (jx - lane, -lane), (L - margin, -lane)]
        routes.append(Route(tuple((float(x), float(y)) for x, y in pts), rx_height))
    return routes


def _segment_box_hits(a: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Open segments a + t d, t in (0, 1), against open boxes.

    a, d: (R, 3); lo, hi: (K, 3).  Returns (R, K) booleans.  Touching a face,
    edge or corner does not count as a hit.
    """
    a = a[:, None, :]
    d = d[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None] - a) / d
        t2 = (hi[None] - a) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    parallel = d == 0
    inside = (a > lo[None]) & (a < hi[None])
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    enter = np.maximum(tmin.max(axis=2), 0.0)
    leave = np.minimum(tmax.min(axis=2), 1.0)
    return enter < leave


def los_blocked(scene: Scene, tx, rx) -> bool:
    """True iff the open segment tx -> rx passes through a building interior."""
    a = np.asarray(tx, dtype=np.float64)
    b = np.asarray(rx, dtype=np.float64)
    if np.array_equal(a, b):
        raise DomainError("los_blocked: tx and rx coincide")
    lo, hi = scene.box_arrays()
    if len(lo) == 0:
        return False
    return bool(_segment_box_hits(a[None], (b - a)[None], lo, hi).any())


def free_space_intercept_db(carrier_hz: float, d0: float = REF_DISTANCE_M) -> float:
    return 20.0 * math.log10(4.0 * math.pi * d0 * carrier_hz / SPEED_OF_LIGHT)


def _lattice_normal(seed: int, ix: int, iy: int) -> float:
    # SeedSequence entropy must be non-negative
    key = [seed & 0xFFFFFFFF, 303, ix + (1 << 20), iy + (1 << 20)]
    return float(np.random.default_rng(key).standard_normal())


def shadowing_db(x: float, y: float, seed: int, sigma: float, cell: float) -> float:
    """Spatially consistent log-normal shadowing at planar position (x, y).

    Standard normals live on a square lattice keyed by (seed, node); the value
    at a point is their bilinear blend renormalised to unit variance, so it is
    continuous in position and exactly N(0, sigma^2) marginally.
    """
    if sigma == 0:
        return 0.0
    u, v = x / cell, y / cell
    i0, j0 = math.floor(u), math.floor(v)
    fu, fv = u - i0, v - j0
    weights = ((1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv)
    nodes = ((i0, j0), (i0 + 1, j0), (i0, j0 + 1), (i0 + 1, j0 + 1))
    acc = sum(wt * _lattice_normal(seed, i, j) for wt, (i, j) in zip(weights, nodes))
    norm = math.sqrt(sum(wt * wt for wt in weights))
    return sigma * acc / norm


def oracle_path_loss(scene: Scene, tx, rx, seed: int, shadowing: bool = True) -> PathLossLabel:
    """Log-distance path loss with a LOS/NLOS split and position-keyed shadowing."""
    a = np.asarray(tx, dtype=np.float64)
    b = np.asarray(rx, dtype=np.float64)
    d = float(np.linalg.norm(b - a))
    if d < REF_DISTANCE_M:
        raise DomainError(f"link distance {d:.3f} m below reference distance {REF_DISTANCE_M} m")
    blocked = los_blocked(scene, a, b)
    n_exp = NLOS_EXPONENT if blocked else LOS_EXPONENT
    pl = free_space_intercept_db(scene.carrier_frequency) + 10.0 * n_exp * math.log10(d / REF_DISTANCE_M)
    if blocked:
        pl += NLOS_EXCESS_DB
    if shadowing:
        pl += shadowing_db(float(b[0]), float(b[1]), seed, scene.shadowing_sigma_db, scene.shadowing_cell_m)
    return PathLossLabel(pl_db=pl, los=not blocked, distance=d)
