"""Preprocessed tensor cache, training loop and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ..engine import Adam, backward, no_grad, ops
from ..engine.tensor import Tensor
from ..errors import ConfigError, DataError
from ..mfef import MFEFNet, ModelConfig
from ..preprocess import PreprocessConfig, clean_cloud, gps_features, simulate_night
from ..sensors import Dataset

Progress = Callable[[str], None]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    modality_mask: tuple[bool, ...] = (True, True, True)
    night_alpha_train: float | None = None
    max_steps: int | None = None
    stop_below_db2: float | None = None  # stop, before stepping, once a training batch MSE (dB^2) is below this
    select_best: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2: batchnorm needs batch statistics in train mode (got {self.batch_size})"
            )
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if len(self.modality_mask) != 3 or not any(self.modality_mask):
            raise ConfigError("modality_mask needs 3 flags with at least one set")
        if self.night_alpha_train is not None and not 0 < self.night_alpha_train < 1:
            raise ConfigError(f"night_alpha_train must lie in (0, 1), got {self.night_alpha_train}")
        if self.stop_below_db2 is not None and not self.stop_below_db2 > 0:
            raise ConfigError(f"stop_below_db2 must be positive, got {self.stop_below_db2}")


@dataclass
class PreparedData:
    """Every sample pushed through the preprocessing chain once, all modalities on."""

    images: np.ndarray  # (N, 3, H, W) float32, day
    points: np.ndarray  # (N, P, 3)
    gps: np.ndarray  # (N, T, 3)
    labels: np.ndarray  # (N,) dB
    split: dict[str, list[int]]
    pp: PreprocessConfig
    _night: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def image_batch(self, idx: np.ndarray, night_alpha: float | None = None) -> np.ndarray:
        if night_alpha is None or night_alpha == 1.0:
            return self.images[idx].astype(np.float64)
        cache = self._night.setdefault(night_alpha, {})
        missing = [i for i in idx if i not in cache]
        if missing:
            hwc = self.images[missing].transpose(0, 2, 3, 1)
            dark = simulate_night(hwc, night_alpha).transpose(0, 3, 1, 2)
            for i, d in zip(missing, dark):
                cache[i] = np.ascontiguousarray(d)
        return np.stack([cache[i] for i in idx])

    def split_indices(self, split: str) -> np.ndarray:
        if split not in self.split:
            raise DataError(f"unknown split {split!r}")
        return np.asarray(self.split[split], dtype=np.int64)


def prepare(ds: Dataset, pp: PreprocessConfig = PreprocessConfig(), progress: Progress | None = None) -> PreparedData:
    n = len(ds)
    if n == 0:
        raise DataError("empty dataset")
    h, w, _ = ds.samples[0].image.shape
    images = np.empty((n, 3, h, w), dtype=np.float32)
    points = np.empty((n, pp.point_budget, 3))
    gps = np.empty((n, pp.gps_window, 3))
    labels = np.empty(n)
    for i, s in enumerate(ds.samples):
        images[i] = s.image.transpose(2, 0, 1)
        points[i] = clean_cloud(s.cloud, pp)
        gps[i] = gps_features(s.gps_track, ds.origin, ds.scene_diagonal, pp)
        labels[i] = s.label.pl_db
        if progress is not None and (i + 1) % 500 == 0:
            progress(f"preprocessed {i + 1}/{n} samples")
    return PreparedData(images, points, gps, labels, {k: list(v) for k, v in ds.split.items()}, pp)


def _as_prepared(data) -> PreparedData:
    return data if isinstance(data, PreparedData) else prepare(data)


def _forward(model: MFEFNet, data: PreparedData, idx: np.ndarray, night_alpha: float | None, dark=None):
    """``dark`` (bool per sample) limits ``night_alpha`` to a subset of the batch."""
    mask = model.cfg.modalities
    image = None
    if mask[0]:
        if dark is None:
            image = data.image_batch(idx, night_alpha)
        else:
            image = data.image_batch(idx)
            if dark.any():
                image[dark] = data.image_batch(idx[dark], night_alpha)
    cloud = data.points[idx] if mask[1] else None
    gps = data.gps[idx] if mask[2] else None
    return model.forward(image, cloud, gps, mask)


def predict(
    model: MFEFNet, data, split: str = "test", night_alpha: float | None = None, batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predictions in dB and the matching labels for a split."""
    data = _as_prepared(data)
    idx = data.split_indices(split)
    if len(idx) == 0:
        raise DataError(f"split {split!r} is empty")
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(idx), batch_size):
                pred, _ = _forward(model, data, idx[start : start + batch_size], night_alpha)
                out.append(pred.data)
    finally:
        model.train(was_training)
    pred_db = np.concatenate(out) * model.label_std + model.label_mean
    return pred_db, data.labels[idx]


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)  # standardized MSE per epoch
    val_loss: list[float] = field(default_factory=list)
    steps: int = 0
    best_epoch: int = -1
    last_batch_mse_db2: float = math.nan  # MSE of the most recent training batch


def _out_of_steps(cfg: TrainConfig, hist: TrainHistory) -> bool:
    return cfg.max_steps is not None and hist.steps >= cfg.max_steps


def _target_reached(cfg: TrainConfig, hist: TrainHistory) -> bool:
    return cfg.stop_below_db2 is not None and hist.last_batch_mse_db2 < cfg.stop_below_db2


def _batches(perm: np.ndarray, batch_size: int) -> list[np.ndarray]:
    out = [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:  # batchnorm cannot train on one sample
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def train(
    data, model_cfg: ModelConfig, train_cfg: TrainConfig, progress: Progress | None = None
) -> tuple[MFEFNet, TrainHistory]:
    """Adam on batch MSE of standardized labels; returns the model and per-epoch losses.

    With ``night_alpha_train`` set, each training image is darkened by that
    factor with probability 1/2 (night-simulation augmentation, redrawn every
    epoch); validation always uses daylight images.

    With ``select_best`` the weights from the epoch with the lowest
    validation loss are restored at the end.
    """
    data = _as_prepared(data)
    idx = data.split_indices("train")
    if len(idx) == 0:
        raise DataError("train split is empty")
    if train_cfg.batch_size > len(idx):
        raise ConfigError(f"batch_size {train_cfg.batch_size} exceeds train split size {len(idx)}")
    val_idx = data.split_indices("val") if "val" in data.split else np.zeros(0, np.int64)

    cfg = replace(model_cfg, modalities=tuple(bool(m) for m in train_cfg.modality_mask))
    model = MFEFNet(cfg)
    y = data.labels[idx]
    model.label_mean = float(y.mean())
    model.label_std = float(y.std()) or 1.0
    params = model.parameters()
    opt = Adam(params, lr=train_cfg.lr)
    seed32 = train_cfg.seed & 0xFFFFFFFF

    hist = TrainHistory()
    best = (math.inf, None)
    for epoch in range(train_cfg.epochs):
        model.train()
        rng = np.random.default_rng([seed32, 707, epoch])
        perm = rng.permutation(idx)
        dark_flags = rng.random(len(perm)) < 0.5 if train_cfg.night_alpha_train is not None else None
        pos = 0
        total, count = 0.0, 0
        for b in _batches(perm, train_cfg.batch_size):
            dark = None if dark_flags is None else dark_flags[pos : pos + len(b)]
            pos += len(b)
            pred, _ = _forward(model, data, b, train_cfg.night_alpha_train, dark)
            target = Tensor((data.labels[b] - model.label_mean) / model.label_std)
            loss = ops.mse_loss(pred, target)
            total += loss.item() * len(b)
            count += len(b)
            hist.last_batch_mse_db2 = loss.item() * model.label_std**2
            if _target_reached(train_cfg, hist):
                break  # leave the weights that achieved the target untouched
            opt.zero_grad()
            backward(loss, params=params)
            opt.step()
            hist.steps += 1
            if _out_of_steps(train_cfg, hist):
                break
        hist.train_loss.append(total / count)
        if len(val_idx):
            p, t = predict(model, data, "val")
            vl = float(np.mean(((p - t) / model.label_std) ** 2))
            hist.val_loss.append(vl)
            if train_cfg.select_best and vl < best[0]:
                best = (vl, model.state_dict())
                hist.best_epoch = epoch
        if progress is not None:
            val = f" val={hist.val_loss[-1]:.4f}" if hist.val_loss else ""
            progress(f"epoch {epoch + 1}/{train_cfg.epochs} train={hist.train_loss[-1]:.4f}{val}")
        if _target_reached(train_cfg, hist) or _out_of_steps(train_cfg, hist):
            break
    if best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()
    return model, hist
