"""Preprocessing: HSV brightness edits, point-cloud cleanup, Miller projection, model inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DomainError

if TYPE_CHECKING:
    from .sensors import Sample

EARTH_RADIUS_M = 6_378_137.0
MILLER_LAT_SCALE = 0.8


@dataclass(frozen=True)
class GpsFix:
    lat_deg: float
    lon_deg: float
    alt_m: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.lat_deg) and -90.0 <= self.lat_deg <= 90.0):
            raise DomainError(f"latitude {self.lat_deg} outside [-90, 90]")
        if not (math.isfinite(self.lon_deg) and -180.0 <= self.lon_deg <= 180.0):
            raise DomainError(f"longitude {self.lon_deg} outside [-180, 180]")
        if not math.isfinite(self.alt_m):
            raise DomainError(f"altitude {self.alt_m} not finite")


@dataclass(frozen=True)
class PlanarCoord:
    x: float
    y: float


@dataclass(frozen=True)
class NightConfig:
    alpha: float = 0.14

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class PreprocessConfig:
    night_alpha: float = 0.14
    knn_k: int = 8
    knn_sigma_mult: float = 2.0
    voxel_m: float = 3.0
    point_budget: int = 512
    gps_window: int = 8
    central_meridian_deg: float = 0.0

    def __post_init__(self):
        NightConfig(self.night_alpha)
        if self.knn_k < 1:
            raise ConfigError(f"knn_k must be >= 1, got {self.knn_k}")
        if not self.knn_sigma_mult > 0:
            raise ConfigError(f"knn_sigma_mult must be positive, got {self.knn_sigma_mult}")
        if not self.voxel_m > 0:
            raise ConfigError(f"voxel_m must be positive, got {self.voxel_m}")
        if self.point_budget < 1:
            raise ConfigError(f"point_budget must be >= 1, got {self.point_budget}")
        if self.gps_window < 1:
            raise ConfigError(f"gps_window must be >= 1, got {self.gps_window}")


@dataclass
class ModelInput:
    image_tensor: np.ndarray  # (3, H, W)
    point_tensor: np.ndarray  # (N, 3)
    gps_tensor: np.ndarray  # (T, 3)
    modality_mask: tuple[bool, bool, bool]


# --- color -----------------------------------------------------------------


def _check_unit_range(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)) or a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
        raise DomainError(f"{what} values must lie in [0, 1]")


def rgb_to_hsv(img) -> np.ndarray:
    """(..., 3) RGB in [0, 1] to HSV with H in degrees [0, 360)."""
    rgb = np.asarray(img, dtype=np.float64)
    if rgb.shape[-1:] != (3,):
        raise DomainError(f"expected trailing channel axis of 3, got shape {rgb.shape}")
    _check_unit_range(rgb, "RGB")
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = v - mn
    s = np.divide(delta, v, out=np.zeros_like(v), where=v > 0)
    safe = np.where(delta > 0, delta, 1.0)
    # branch priority follows which channel attains V: R, then G, then B
    h = np.where(
        v == r,
        60.0 * (g - b) / safe,
        np.where(v == g, 60.0 * (2.0 + (b - r) / safe), 60.0 * (4.0 + (r - g) / safe)),
    )
    h = np.where(delta > 0, h, 0.0)
    h = np.where(h < 0, h + 360.0, h)
    h = np.where(h >= 360.0, h - 360.0, h)  # -tiny + 360 can round up to 360
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`."""
    a = np.asarray(hsv, dtype=np.float64)
    if a.shape[-1:] != (3,):
        raise DomainError(f"expected trailing channel axis of 3, got shape {a.shape}")
    h, s, v = a[..., 0], a[..., 1], a[..., 2]
    if not np.all(np.isfinite(a)) or np.any((h < 0) | (h >= 360)):
        raise DomainError("hue must lie in [0, 360)")
    _check_unit_range(a[..., 1:], "S/V")
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(np.mod(hp, 2.0) - 1.0))
    m = v - c
    sector = np.minimum(np.floor(hp).astype(int), 5)
    zero = np.zeros_like(c)
    table = [(c, x, zero), (x, c, zero), (zero, c, x), (zero, x, c), (x, zero, c), (c, zero, x)]
    out = np.zeros(a.shape)
    for k, (rr, gg, bb) in enumerate(table):
        sel = sector == k
        out[..., 0] = np.where(sel, rr, out[..., 0])
        out[..., 1] = np.where(sel, gg, out[..., 1])
        out[..., 2] = np.where(sel, bb, out[..., 2])
    return np.clip(out + m[..., None], 0.0, 1.0)


def simulate_night(img, cfg: NightConfig | float = NightConfig()) -> np.ndarray:
    """Scale the V channel by alpha, leaving hue and saturation untouched."""
    if not isinstance(cfg, NightConfig):
        cfg = NightConfig(float(cfg))
    hsv = rgb_to_hsv(img)
    hsv[..., 2] *= cfg.alpha
    return hsv_to_rgb(hsv)


def mean_brightness(img) -> float:
    """Mean per-pixel V = max(R, G, B); a unitless brightness proxy."""
    rgb = np.asarray(img, dtype=np.float64)
    _check_unit_range(rgb, "RGB")
    return float(rgb.max(axis=-1).mean())


# --- point clouds ----------------------------------------------------------


def _as_cloud(pc) -> np.ndarray:
    pts = np.asarray(pc, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise DomainError("point cloud contains non-finite coordinates")
    return pts


def knn_mean_distance(pts: np.ndarray, k: int) -> np.ndarray:
    """Mean distance from each point to its k nearest other points."""
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    return dist[:, 1:].mean(axis=1)


def remove_outliers(pc, k: int = 8, sigma_mult: float = 2.0) -> np.ndarray:
    """Statistical outlier removal on the k-NN mean-distance statistic."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not sigma_mult > 0:
        raise ConfigError(f"sigma_mult must be positive, got {sigma_mult}")
    pts = _as_cloud(pc)
    if len(pts) <= k:
        return pts.copy()
    stat = knn_mean_distance(pts, k)
    keep = stat <= stat.mean() + sigma_mult * stat.std()
    return pts[keep]


def voxel_downsample(pc, voxel: float) -> np.ndarray:
    """One centroid per occupied voxel, ordered by lexicographic voxel index."""
    if not voxel > 0:
        raise ConfigError(f"voxel must be positive, got {voxel}")
    pts = _as_cloud(pc)
    if len(pts) == 0:
        return pts.copy()
    idx = np.floor(pts / voxel).astype(np.int64)
    keys, inverse = np.unique(idx, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(keys)).astype(np.float64)
    out = np.empty((len(keys), 3))
    for axis in range(3):
        out[:, axis] = np.bincount(inverse, weights=pts[:, axis], minlength=len(keys)) / counts
    # rounding can push a centroid of points on a boundary just outside the voxel
    return np.clip(out, keys * voxel, (keys + 1) * voxel)


def fit_to_budget(pts: np.ndarray, budget: int) -> np.ndarray:
    """Truncate to ``budget`` points or pad by repeating the last point."""
    if len(pts) == 0:
        return np.zeros((budget, 3))
    if len(pts) >= budget:
        return pts[:budget].copy()
    pad = np.repeat(pts[-1:], budget - len(pts), axis=0)
    return np.concatenate([pts, pad], axis=0)


# --- geodesy ---------------------------------------------------------------


def miller_project(fix: GpsFix, central_meridian_deg: float = 0.0) -> PlanarCoord:
    """Longitude maps linearly to x, latitude through ln tan(pi/4 + 0.4 phi) / 0.8 to y."""
    if abs(fix.lat_deg) >= 90.0:
        raise DomainError(f"latitude {fix.lat_deg} at a pole")
    lam = math.radians(fix.lon_deg - central_meridian_deg)
    phi = math.radians(fix.lat_deg)
    x = EARTH_RADIUS_M * lam
    # ln tan(pi/4 + u) == 2 atanh(tan u), which is exact at the equator
    y = EARTH_RADIUS_M * 2.0 * math.atanh(math.tan(0.5 * MILLER_LAT_SCALE * phi)) / MILLER_LAT_SCALE
    return PlanarCoord(x, y)


def miller_unproject(p: PlanarCoord, central_meridian_deg: float = 0.0, alt_m: float = 0.0) -> GpsFix:
    if not (math.isfinite(p.x) and math.isfinite(p.y)):
        raise DomainError(f"planar coordinate {p} not finite")
    lam = p.x / EARTH_RADIUS_M
    phi = math.atan(math.tanh(0.5 * MILLER_LAT_SCALE * p.y / EARTH_RADIUS_M)) / (0.5 * MILLER_LAT_SCALE)
    lat = math.degrees(phi)
    lon = math.degrees(lam) + central_meridian_deg
    if not -90.0 <= lat <= 90.0:
        raise DomainError(f"unprojected latitude {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise DomainError(f"unprojected longitude {lon} outside [-180, 180]")
    return GpsFix(lat, lon, alt_m)


# --- model inputs ----------------------------------------------------------


def clean_cloud(cloud, cfg: PreprocessConfig) -> np.ndarray:
    pts = remove_outliers(cloud, cfg.knn_k, cfg.knn_sigma_mult)
    pts = voxel_downsample(pts, cfg.voxel_m)
    return fit_to_budget(pts, cfg.point_budget)


def gps_features(
    track: Sequence[GpsFix], origin: GpsFix, scene_diagonal: float, cfg: PreprocessConfig
) -> np.ndarray:
    """(T, 3) planar offsets from ``origin`` scaled by the scene diagonal, altitude / 100."""
    track = list(track)
    if not track:
        raise DomainError("empty GPS track")
    track = track[-cfg.gps_window :]
    track = [track[0]] * (cfg.gps_window - len(track)) + track
    o = miller_project(origin, cfg.central_meridian_deg)
    rows = []
    for fix in track:
        p = miller_project(fix, cfg.central_meridian_deg)
        rows.append(((p.x - o.x) / scene_diagonal, (p.y - o.y) / scene_diagonal, fix.alt_m / 100.0))
    return np.array(rows)


def build_model_input(
    sample: "Sample",
    cfg: PreprocessConfig,
    mask: Sequence[bool],
    *,
    origin: GpsFix,
    scene_diagonal: float,
    night: bool = False,
) -> ModelInput:
    """Run the full chain on one sample; masked-out modalities become zero tensors."""
    mask = tuple(bool(m) for m in mask)
    if len(mask) != 3 or not any(mask):
        raise ConfigError(f"modality mask must have 3 entries with at least one set, got {mask}")
    h, w = sample.image.shape[:2]
    if mask[0]:
        img = simulate_night(sample.image, cfg.night_alpha) if night else np.asarray(sample.image, np.float64)
        image = np.ascontiguousarray(img.transpose(2, 0, 1))
    else:
        image = np.zeros((3, h, w))
    points = clean_cloud(sample.cloud, cfg) if mask[1] else np.zeros((cfg.point_budget, 3))
    if mask[2]:
        gps = gps_features(sample.gps_track, origin, scene_diagonal, cfg)
    else:
        gps = np.zeros((cfg.gps_window, 3))
    return ModelInput(image, points, gps, mask)
