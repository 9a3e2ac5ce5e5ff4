"""Self-checks: the preprocessing chain against independent references, and a small overfit run.

Each preprocessing row is (name, observed error, limit, passed).
"""

from __future__ import annotations

import colorsys
import math
import time
from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np

from ..engine import no_grad
from ..mfef import ModelConfig
from ..preprocess import GpsFix, hsv_to_rgb, miller_project, miller_unproject, rgb_to_hsv, voxel_downsample
from ..scene import SceneConfig, build_scene, generate_routes
from ..sensors import generate_dataset
from .training import TrainConfig, _forward, prepare, train


def brute_force_voxels(pts: np.ndarray, voxel: float) -> dict[tuple[int, int, int], np.ndarray]:
    """Bucket points one at a time into a dict keyed by integer voxel index."""
    buckets = defaultdict(list)
    for p in pts:
        key = tuple(int(math.floor(c / voxel)) for c in p)
        buckets[key].append(p)
    return {k: np.mean(v, axis=0) for k, v in buckets.items()}


def preprocessing_checks(seed: int = 0) -> list[tuple[str, float, float, bool]]:
    rng = np.random.default_rng(seed)
    rows = []

    def add(name, err, limit):
        rows.append((name, float(err), float(limit), bool(err < limit)))

    colors = rng.random((1000, 3))
    add("hsv_round_trip_max_abs", np.abs(hsv_to_rgb(rgb_to_hsv(colors)) - colors).max(), 1e-6)
    ours = rgb_to_hsv(colors)
    ref = np.array([colorsys.rgb_to_hsv(*c) for c in colors])
    ref[:, 0] *= 360.0
    add("hsv_vs_colorsys_max_abs", np.abs(ours - ref).max(), 1e-9)
    spot = rgb_to_hsv(np.array([[1.0, 0.0, 0.0], [0.2, 0.4, 0.6]]))
    add("hsv_spot_values", np.abs(spot - [[0.0, 1.0, 1.0], [210.0, 2 / 3, 0.6]]).max(), 1e-9)

    worst = 0.0
    for lat, lon in zip(rng.uniform(-85, 85, 1000), rng.uniform(-180, 180, 1000)):
        back = miller_unproject(miller_project(GpsFix(lat, lon)))
        worst = max(worst, abs(math.radians(back.lat_deg - lat)), abs(math.radians(back.lon_deg - lon)))
    add("miller_round_trip_rad", worst, 1e-9)
    # closed form at 40 deg: R * ln(tan(pi/4 + 0.4 * 40deg)) / 0.8
    y40 = 6378137.0 * math.log(math.tan(math.radians(45.0 + 16.0))) / 0.8
    add("miller_lat40_abs_m", abs(miller_project(GpsFix(40.0, 0.0)).y - y40), 1.0)

    pts = rng.uniform(-20, 20, (10_000, 3))
    voxel = 1.7
    got = voxel_downsample(pts, voxel)
    oracle = brute_force_voxels(pts, voxel)
    keys = sorted(oracle)
    expected = np.array([oracle[k] for k in keys])
    err = np.abs(got - expected).max() if got.shape == expected.shape else math.inf
    add("voxel_vs_bucketing_max_abs", err, 1e-9)
    return rows


@dataclass
class OverfitResult:
    mse_db2: float  # train-mode MSE of the final weights on the whole training batch
    steps: int
    seconds: float


def overfit_check(
    n_samples: int = 16,
    max_steps: int = 2000,
    target_db2: float = 0.01,
    model_cfg: ModelConfig = ModelConfig(width_mult=0.125),
    lr: float = 3e-3,
    seed: int = 0,
) -> OverfitResult:
    """Fit one full batch of synthetic samples until its MSE drops below ``target_db2``."""
    scene = build_scene(SceneConfig(seed=seed))
    ds = generate_dataset(scene, generate_routes(scene, 4, seed=seed), n_samples, seed=seed)
    everything = list(range(n_samples))
    data = replace(prepare(ds), split={"train": everything, "val": [], "test": everything})
    t0 = time.perf_counter()
    cfg = TrainConfig(
        epochs=max_steps, batch_size=n_samples, lr=lr, seed=seed, max_steps=max_steps, stop_below_db2=target_db2
    )
    model, hist = train(data, model_cfg, cfg)
    # re-measure with the final weights, batch statistics as in training
    model.train()
    with no_grad():
        pred, _ = _forward(model, data, np.arange(n_samples), None)
    model.eval()
    mse = float(np.mean((pred.data * model.label_std + model.label_mean - data.labels) ** 2))
    return OverfitResult(mse, hist.steps, time.perf_counter() - t0)
