"""Camera, LiDAR and GPS synthesis at receiver poses, plus dataset assembly and storage."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, DomainError, FormatError
from .preprocess import GpsFix, PlanarCoord, miller_project, miller_unproject
from .scene import PathLossLabel, Route, Scene, oracle_path_loss

SKY_COLOR = (0.55, 0.72, 0.95)
GROUND_COLOR = (0.35, 0.33, 0.30)
MAST_COLOR = (1.0, 0.95, 0.2)
DEFAULT_ORIGIN = GpsFix(39.96, 116.35, 0.0)

GROUND_ID = -1
MISS_ID = -2


@dataclass(frozen=True)
class RxPose:
    x: float
    y: float
    heading: float  # radians, 0 = +x


@dataclass(frozen=True)
class CameraConfig:
    width: int = 64
    height: int = 64
    fov_deg: float = 90.0
    height_m: float = 3.1
    draw_mast: bool = True

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"camera resolution must be positive, got {self.width}x{self.height}")
        if not 0 < self.fov_deg < 180:
            raise ConfigError(f"fov_deg must lie in (0, 180), got {self.fov_deg}")


@dataclass(frozen=True)
class LidarConfig:
    n_azimuth: int = 720
    n_elevation: int = 16
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 15.0
    max_range_m: float = 80.0
    height_m: float = 2.1
    range_noise_m: float = 0.02
    outlier_fraction: float = 0.02

    def __post_init__(self):
        if not self.max_range_m > 0:
            raise ConfigError(f"max_range_m must be positive, got {self.max_range_m}")
        if self.n_azimuth < 1 or self.n_elevation < 1:
            raise ConfigError("n_azimuth and n_elevation must be >= 1")
        if self.elevation_max_deg < self.elevation_min_deg:
            raise ConfigError("elevation_max_deg below elevation_min_deg")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ConfigError(f"outlier_fraction must lie in [0, 1], got {self.outlier_fraction}")
        if self.range_noise_m < 0:
            raise ConfigError("range_noise_m must be >= 0")


# --- ray casting -----------------------------------------------------------


def cast_rays(scene: Scene, origin, dirs: np.ndarray, max_t: float = np.inf):
    """Nearest hit along each ray ``origin + t * dir`` with t > 0.

    Returns (t, ids, axis): hit parameter (inf on miss), building index /
    GROUND_ID / MISS_ID, and the axis of the face normal (2 for ground).
    """
    o = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(dirs)
    best = np.full(n, np.inf)
    ids = np.full(n, MISS_ID, dtype=np.int64)
    axis = np.full(n, -1, dtype=np.int64)

    if scene.has_ground:
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(dz < 0, -o[2] / dz, np.inf)
        hit = tg > 0
        best = np.where(hit, tg, best)
        ids = np.where(hit & np.isfinite(tg), GROUND_ID, ids)
        axis = np.where(hit & np.isfinite(tg), 2, axis)

    lo, hi = scene.box_arrays()
    if len(lo):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo[None] - o) * inv[:, None, :]
            t2 = (hi[None] - o) * inv[:, None, :]
        # rays parallel to a slab: inside -> unconstrained, outside -> miss
        par = dirs[:, None, :] == 0
        inside = (o > lo) & (o < hi)
        tmin = np.where(par, np.where(inside[None], -np.inf, np.inf), np.minimum(t1, t2))
        tmax = np.where(par, np.where(inside[None], np.inf, -np.inf), np.maximum(t1, t2))
        enter = tmin.max(axis=2)
        leave = tmax.min(axis=2)
        valid = (enter < leave) & (enter > 0)
        t_box = np.where(valid, enter, np.inf)
        k = t_box.argmin(axis=1)
        tk = t_box[np.arange(n), k]
        closer = tk < best
        best = np.where(closer, tk, best)
        ids = np.where(closer, k, ids)
        face = tmin[np.arange(n), k].argmax(axis=1)
        axis = np.where(closer, face, axis)

    miss = best > max_t
    best[miss] = np.inf
    ids[miss] = MISS_ID
    axis[miss] = -1
    return best, ids, axis


def _camera_basis(heading: float):
    fwd = np.array([math.cos(heading), math.sin(heading), 0.0])
    right = np.array([math.sin(heading), -math.cos(heading), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    return fwd, right, up


def camera_rays(pose: RxPose, camera: CameraConfig) -> np.ndarray:
    """(H*W, 3) ray directions, row-major, row 0 at the top."""
    fwd, right, up = _camera_basis(pose.heading)
    tan_h = math.tan(math.radians(camera.fov_deg) / 2)
    tan_v = tan_h * camera.height / camera.width
    u = ((np.arange(camera.width) + 0.5) / camera.width * 2 - 1) * tan_h
    v = (1 - (np.arange(camera.height) + 0.5) / camera.height * 2) * tan_v
    vv, uu = np.meshgrid(v, u, indexing="ij")
    dirs = fwd + uu[..., None] * right + vv[..., None] * up
    return dirs.reshape(-1, 3)


def image_hit_ids(scene: Scene, pose: RxPose, camera: CameraConfig = CameraConfig()) -> np.ndarray:
    """(H, W) id of the surface each pixel sees."""
    origin = (pose.x, pose.y, camera.height_m)
    _, ids, _ = cast_rays(scene, origin, camera_rays(pose, camera))
    return ids.reshape(camera.height, camera.width)


def render_image(scene: Scene, pose: RxPose, camera: CameraConfig = CameraConfig()) -> np.ndarray:
    """Ray-cast pinhole render, (H, W, 3) float32 in [0, 1]."""
    origin = np.array([pose.x, pose.y, camera.height_m])
    dirs = camera_rays(pose, camera)
    t, ids, axis = cast_rays(scene, origin, dirs)
    img = np.empty((len(dirs), 3))
    img[:] = SKY_COLOR
    img[ids == GROUND_ID] = GROUND_COLOR
    if scene.buildings:
        albedo = np.array([b.albedo for b in scene.buildings])
        on_b = ids >= 0
        dist = t[on_b] * np.linalg.norm(dirs[on_b], axis=1)
        depth = 0.45 + 0.55 * np.exp(-dist / 80.0)
        face = np.array([1.0, 0.8, 0.9])[axis[on_b]]
        img[on_b] = albedo[ids[on_b]] * (depth * face)[:, None]
    img = img.reshape(camera.height, camera.width, 3)
    if camera.draw_mast:
        _draw_mast(img, scene, pose, camera, origin)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _draw_mast(img, scene: Scene, pose: RxPose, camera: CameraConfig, origin) -> None:
    """Bright vertical marker at the transmitter when it is in view and unoccluded."""
    from .scene import los_blocked

    tx = np.asarray(scene.tx_pose, dtype=np.float64)
    rel = tx - origin
    fwd, right, _ = _camera_basis(pose.heading)
    depth = float(rel @ fwd)
    if depth < 0.5 or los_blocked(scene, origin, tx):
        return
    tan_h = math.tan(math.radians(camera.fov_deg) / 2)
    tan_v = tan_h * camera.height / camera.width
    u = float(rel @ right) / depth / tan_h
    if abs(u) >= 1:
        return
    col = int((u + 1) / 2 * camera.width)

    def row(z):
        v = (z - origin[2]) / depth / tan_v
        return (1 - v) / 2 * camera.height

    top = max(int(math.floor(row(tx[2] + 0.5))), 0)
    bottom = min(int(math.ceil(row(0.0))), camera.height)
    bottom = max(bottom, min(top + 3, camera.height))
    if top >= camera.height:
        return
    img[top:bottom, col] = MAST_COLOR


def lidar_rays(pose: RxPose, lidar: LidarConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unit ray directions in the world frame and in the sensor frame (x forward)."""
    az = np.arange(lidar.n_azimuth) * (2 * math.pi / lidar.n_azimuth)
    el = np.radians(np.linspace(lidar.elevation_min_deg, lidar.elevation_max_deg, lidar.n_elevation))
    ee, aa = np.meshgrid(el, az, indexing="ij")
    local = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T, local


def render_point_cloud(
    scene: Scene, pose: RxPose, lidar: LidarConfig = LidarConfig(), seed: int = 0, return_outlier_mask: bool = False
):
    """Spherical sweep; returns (N, 3) float32 hits in the sensor frame."""
    origin = (pose.x, pose.y, lidar.height_m)
    world, local = lidar_rays(pose, lidar)
    t, ids, _ = cast_rays(scene, origin, world, max_t=lidar.max_range_m)
    hit = ids != MISS_ID
    rng = np.random.default_rng(seed)
    r = t[hit]
    if lidar.range_noise_m > 0:
        r = r + rng.normal(0.0, lidar.range_noise_m, size=r.shape)
    pts = local[hit] * r[:, None]
    outlier = rng.random(len(pts)) < lidar.outlier_fraction
    n_out = int(outlier.sum())
    if n_out:
        d = rng.standard_normal((n_out, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        radius = 1.5 * lidar.max_range_m * rng.random(n_out) ** (1.0 / 3.0)
        pts[outlier] = d * radius[:, None]
    pts = pts.astype(np.float32)
    return (pts, outlier) if return_outlier_mask else pts


# --- GPS -------------------------------------------------------------------


def sample_gps(
    route: Route,
    arc_position: float,
    origin: GpsFix,
    seed: int = 0,
    noise_m: float = 1.5,
    central_meridian_deg: float = 0.0,
) -> GpsFix:
    """Fix at ``arc_position``; ``origin`` is the (noise-free) fix at the route start."""
    if not 0.0 <= arc_position <= route.length:
        raise DomainError(f"arc position {arc_position} outside route of length {route.length}")
    if noise_m == 0 and arc_position == 0:
        return GpsFix(origin.lat_deg, origin.lon_deg, route.rx_height)
    x0, y0, _ = route.point_at(0.0)
    x, y, _ = route.point_at(arc_position)
    dx, dy = x - x0, y - y0
    if noise_m > 0:
        ex, ey = np.random.default_rng(seed).normal(0.0, noise_m, size=2)
        dx, dy = dx + ex, dy + ey
    o = miller_project(origin, central_meridian_deg)
    return miller_unproject(PlanarCoord(o.x + dx, o.y + dy), central_meridian_deg, route.rx_height)


def fix_at(origin: GpsFix, x: float, y: float, alt: float = 0.0, central_meridian_deg: float = 0.0) -> GpsFix:
    """Fix at scene-plane offset (x, y) from ``origin``."""
    o = miller_project(origin, central_meridian_deg)
    return miller_unproject(PlanarCoord(o.x + x, o.y + y), central_meridian_deg, alt)


# --- dataset ---------------------------------------------------------------


@dataclass
class Sample:
    id: int
    image: np.ndarray  # (H, W, 3) float32
    cloud: np.ndarray  # (N, 3) float32
    gps_track: list[GpsFix]
    label: PathLossLabel
    pose: dict = field(default_factory=dict)


@dataclass
class Dataset:
    samples: list[Sample]
    scene_config_digest: str
    split: dict[str, list[int]]
    origin: GpsFix = DEFAULT_ORIGIN
    scene_diagonal: float = 1.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(_manifest_text(self, file_digests=False).encode())
        for s in self.samples:
            h.update(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            h.update(np.ascontiguousarray(s.cloud, dtype="<f4").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 2600
    gps_window: int = 8
    seed: int = 0
    arc_step_m: float = 2.0
    gps_noise_m: float = 1.5
    shadowing: bool = True
    route_count: int = 4


def split_indices(n: int, seed: int) -> dict[str, list[int]]:
    order = np.random.default_rng([seed & 0xFFFFFFFF, 404]).permutation(n)
    n_train = int(round(0.7 * n))
    n_val = int(round(0.15 * n))
    return {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }


def _trip_positions(route: Route, trip: int, step: float) -> np.ndarray:
    # golden-ratio phase so successive trips sample different points
    phase = (trip * 0.6180339887498949) % 1.0 * step
    return np.arange(phase, route.length + 1e-9, step)


def generate_dataset(
    scene: Scene,
    routes: Sequence[Route],
    n_samples: int = 2600,
    gps_window: int = 8,
    seed: int = 0,
    *,
    camera: CameraConfig = CameraConfig(),
    lidar: LidarConfig = LidarConfig(),
    origin: GpsFix = DEFAULT_ORIGIN,
    arc_step_m: float = 2.0,
    gps_noise_m: float = 1.5,
    shadowing: bool = True,
    config_digest: str = "",
    progress=None,
) -> Dataset:
    """Walk the routes in turn at fixed arc steps and render every modality per pose."""
    routes = list(routes)
    if not routes:
        raise ConfigError("routes must be nonempty")
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if gps_window < 1:
        raise ConfigError(f"gps_window must be >= 1, got {gps_window}")
    if not arc_step_m > 0:
        raise ConfigError(f"arc_step_m must be positive, got {arc_step_m}")
    seed32 = seed & 0xFFFFFFFF

    cursors = [(0, 0)] * len(routes)  # (trip, index within trip)
    samples = []
    for i in range(n_samples):
        r = i % len(routes)
        route = routes[r]
        trip, j = cursors[r]
        arcs = _trip_positions(route, trip, arc_step_m)
        if j >= len(arcs):
            trip, j = trip + 1, 0
            arcs = _trip_positions(route, trip, arc_step_m)
        cursors[r] = (trip, j + 1)

        x, y, heading = map(float, route.point_at(float(arcs[j])))
        pose = RxPose(x, y, heading)
        x0, y0, _ = route.point_at(0.0)
        start_fix = fix_at(origin, x0, y0)
        track = []
        for q in range(gps_window - 1, -1, -1):
            jq = max(j - q, 0)
            fix_seed = np.random.SeedSequence([seed32, 505, r, trip, jq]).generate_state(2)
            track.append(
                sample_gps(route, float(arcs[jq]), start_fix, seed=fix_seed, noise_m=gps_noise_m)
            )
        image = render_image(scene, pose, camera)
        cloud = render_point_cloud(scene, pose, lidar, seed=np.random.SeedSequence([seed32, 606, i]).generate_state(2))
        label = oracle_path_loss(scene, scene.tx_pose, (x, y, route.rx_height), seed, shadowing=shadowing)
        meta = {"route": r, "trip": trip, "arc": float(arcs[j]), "x": x, "y": y, "heading": heading,
                "rx_height": route.rx_height, "shadowing": shadowing}
        samples.append(Sample(i, image, cloud, track, label, meta))
        if progress is not None and (i + 1) % 200 == 0:
            progress(i + 1, n_samples)

    gen = f"{config_digest};n={n_samples};T={gps_window};seed={seed};step={arc_step_m};noise={gps_noise_m};" \
          f"shadow={shadowing};cam={camera};lidar={lidar};origin={origin};routes={[r_.waypoints for r_ in routes]}"
    digest = hashlib.sha256(gen.encode()).hexdigest()
    return Dataset(samples, digest, split_indices(n_samples, seed), origin, scene.diagonal)


def regenerate_label(scene: Scene, sample: Sample, seed: int) -> PathLossLabel:
    """Recompute a sample's label from its stored pose (alignment check)."""
    p = sample.pose
    return oracle_path_loss(scene, scene.tx_pose, (p["x"], p["y"], p["rx_height"]), seed, shadowing=p["shadowing"])


# --- storage ---------------------------------------------------------------


def _fix_record(f: GpsFix) -> list[str]:
    return [repr(float(f.lat_deg)), repr(float(f.lon_deg)), repr(float(f.alt_m))]


def _sample_record(s: Sample) -> dict:
    return {
        "id": s.id,
        "gps_track": [_fix_record(f) for f in s.gps_track],
        "label": {"pl_db": repr(float(s.label.pl_db)), "los": bool(s.label.los), "distance": repr(float(s.label.distance))},
        "pose": {k: (repr(float(v)) if isinstance(v, float) else v) for k, v in s.pose.items()},
    }


def _manifest_text(ds: Dataset, file_digests: bool, files: dict | None = None) -> str:
    records = []
    for s in ds.samples:
        rec = _sample_record(s)
        if file_digests and files is not None:
            rec.update(files[s.id])
        records.append(rec)
    manifest = {
        "format": "pathfusion-dataset-1",
        "sample_count": len(ds.samples),
        "scene_config_digest": ds.scene_config_digest,
        "split": ds.split,
        "origin": _fix_record(ds.origin),
        "scene_diagonal": repr(ds.scene_diagonal),
        "meta": ds.meta,
        "samples": records,
    }
    return json.dumps(manifest, indent=1, sort_keys=True)


def _write_blob(path: Path, header: str, arr: np.ndarray) -> str:
    payload = header.encode() + b"\n" + np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path.write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "clouds").mkdir(parents=True, exist_ok=True)
    files = {}
    for s in ds.samples:
        h, w, c = s.image.shape
        img_name = f"images/{s.id:05d}.img"
        pcd_name = f"clouds/{s.id:05d}.pcd"
        files[s.id] = {
            "image": img_name,
            "image_sha256": _write_blob(d / img_name, f"IMG1 {w} {h} {c}", s.image),
            "cloud": pcd_name,
            "cloud_sha256": _write_blob(d / pcd_name, f"PCD1 {len(s.cloud)}", s.cloud),
        }
    tmp = d / "manifest.json.tmp"
    tmp.write_text(_manifest_text(ds, True, files))
    os.replace(tmp, d / "manifest.json")


def _read_blob(path: Path, expected_sha: str, magic: str) -> tuple[list[int], np.ndarray]:
    data = path.read_bytes()
    if hashlib.sha256(data).hexdigest() != expected_sha:
        raise CorruptionError(f"checksum mismatch in {path}")
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header")
    parts = data[:nl].decode(errors="replace").split()
    if not parts or parts[0] != magic:
        raise FormatError(f"{path}: expected {magic} header")
    try:
        dims = [int(p) for p in parts[1:]]
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    payload = data[nl + 1 :]
    expected = 4 * int(np.prod(dims + [3] if magic == "PCD1" else dims))
    if len(payload) != expected:
        raise CorruptionError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return dims, np.frombuffer(payload, dtype="<f4").astype(np.float32)


def _fix(rec) -> GpsFix:
    return GpsFix(float(rec[0]), float(rec[1]), float(rec[2]))


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"no manifest.json in {d}")
    try:
        manifest = json.loads(mpath.read_text())
        records = manifest["samples"]
        count = manifest["sample_count"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{mpath}: malformed manifest ({exc})") from exc
    if count != len(records):
        raise FormatError(f"manifest declares {count} samples but lists {len(records)}")
    missing = [r["id"] for r in records if not ((d / r["image"]).is_file() and (d / r["cloud"]).is_file())]
    if missing:
        raise FormatError(f"missing modality files for sample ids {missing}")

    samples = []
    for r in records:
        (w, h, c), img = _read_blob(d / r["image"], r["image_sha256"], "IMG1")
        (n,), cloud = _read_blob(d / r["cloud"], r["cloud_sha256"], "PCD1")
        lab = r["label"]
        label = PathLossLabel(float(lab["pl_db"]), bool(lab["los"]), float(lab["distance"]))
        pose = {k: (float(v) if isinstance(v, str) else v) for k, v in r["pose"].items()}
        samples.append(
            Sample(r["id"], img.reshape(h, w, c), cloud.reshape(n, 3), [_fix(f) for f in r["gps_track"]], label, pose)
        )
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate sample ids in manifest")
    return Dataset(
        samples,
        manifest["scene_config_digest"],
        {k: list(v) for k, v in manifest["split"].items()},
        _fix(manifest["origin"]),
        float(manifest["scene_diagonal"]),
        manifest.get("meta", {}),
    )
