"""Multi-modal feature extraction and fusion network.

Three encoders (residual CNN for images, PointNet-style encoder with an
optional spatial transform for point clouds, GRU for GPS tracks) feed
per-modality projections.  A linear scorer over the concatenated projections
emits one logit per modality; a masked softmax turns them into weights, and
the weighted sum of projections goes through a two-layer regression head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import ops
from .engine.ops import BatchNormState
from .engine.recurrent import GRU_PARAM_NAMES, gru_sequence
from .engine.tensor import Tensor
from .errors import ConfigError, ContractError, ShapeError

MODALITIES = ("image", "cloud", "gps")
HEAD_HIDDEN = 64


@dataclass(frozen=True)
class ModelConfig:
    width_mult: float = 1.0
    d_img: int = 512
    d_pc: int = 1024
    d_gps: int = 128
    d_fused: int = 128
    image_stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    pc_channels: tuple[int, ...] = (64, 128, 1024)
    stn_channels: tuple[int, ...] = (16, 32)
    use_stn: bool = True
    gps_window: int = 8
    modalities: tuple[bool, ...] = (True, True, True)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.width_mult <= 1.0:
            raise ConfigError(f"width_mult must be in (0, 1], got {self.width_mult}")
        if len(self.image_stage_channels) != 4:
            raise ConfigError("image_stage_channels needs 4 entries")
        if len(self.pc_channels) != 3:
            raise ConfigError("pc_channels needs 3 entries")
        if self.pc_channels[-1] != self.d_pc:
            raise ConfigError(
                f"pc_channels[-1] ({self.pc_channels[-1]}) must equal d_pc ({self.d_pc})"
            )
        if len(self.modalities) != 3 or not any(self.modalities):
            raise ConfigError("modalities needs 3 flags with at least one set")
        dims = (self.d_img, self.d_pc, self.d_gps, self.d_fused, self.gps_window)
        if min(dims + self.image_stage_channels + self.pc_channels + self.stn_channels) < 1:
            raise ConfigError("all model dimensions must be >= 1")

    def scaled(self, n: int) -> int:
        return max(1, math.ceil(n * self.width_mult))

    @property
    def img_channels(self) -> tuple[int, ...]:
        return tuple(self.scaled(c) for c in self.image_stage_channels)

    @property
    def pc_widths(self) -> tuple[int, ...]:
        return tuple(self.scaled(c) for c in self.pc_channels)

    @property
    def stn_widths(self) -> tuple[int, ...]:
        return tuple(self.scaled(c) for c in self.stn_channels)

    @property
    def img_dim(self) -> int:
        return self.scaled(self.d_img)

    @property
    def pc_dim(self) -> int:
        return self.pc_widths[-1]

    @property
    def gps_dim(self) -> int:
        return self.scaled(self.d_gps)


@dataclass
class FusionTrace:
    attention_weights: np.ndarray  # (B, 3)
    projections: dict[str, np.ndarray] = field(default_factory=dict)


def _uniform(rng: np.random.Generator, shape: Sequence[int], bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=tuple(shape))


class MFEFNet:
    """Parameters, batch-norm state and forward pass of the fusion network.

    Batched everywhere: images (B, 3, H, W), clouds (B, N, 3), tracks (B, T, 3).
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.training = False
        self.label_mean = 0.0
        self.label_std = 1.0
        img, pc, gps = cfg.modalities
        if img:
            self._init_image(self._rng(1))
        if pc:
            if cfg.use_stn:
                self._init_stn(self._rng(2))
            self._init_points(self._rng(3))
        if gps:
            self._init_gps(self._rng(4))
        self._init_fusion(self._rng(5))

    # -- construction -----------------------------------------------------
    def _rng(self, component: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed & 0xFFFFFFFF, component])

    def _param(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _bn(self, name: str, channels: int) -> None:
        self._param(f"{name}.gamma", np.ones(channels))
        self._param(f"{name}.beta", np.zeros(channels))
        self.bn[name] = BatchNormState.fresh(channels)

    def _conv(self, rng, name: str, c_in: int, c_out: int, k: int) -> None:
        fan_in = c_in * k * k
        self._param(f"{name}.w", _uniform(rng, (c_out, c_in, k, k), math.sqrt(6.0 / fan_in)))

    def _linear(self, rng, name: str, d_in: int, d_out: int, relu_gain: bool = False, bias: bool = True) -> None:
        bound = math.sqrt(6.0 / d_in) if relu_gain else 1.0 / math.sqrt(d_in)
        self._param(f"{name}.w", _uniform(rng, (d_in, d_out), bound))
        if bias:
            self._param(f"{name}.b", np.zeros(d_out))

    def _init_image(self, rng) -> None:
        chans = self.cfg.img_channels
        self._conv(rng, "img.stem", 3, chans[0], 3)
        self._bn("img.stem.bn", chans[0])
        c_in = chans[0]
        for s, c in enumerate(chans):
            for b in range(2):
                pre = f"img.s{s}.b{b}"
                self._conv(rng, f"{pre}.conv1", c_in, c, 3)
                self._bn(f"{pre}.bn1", c)
                self._conv(rng, f"{pre}.conv2", c, c, 3)
                self._bn(f"{pre}.bn2", c)
                if c_in != c or (s > 0 and b == 0):
                    self._conv(rng, f"{pre}.proj", c_in, c, 1)
                    self._bn(f"{pre}.proj.bn", c)
                c_in = c
        self._linear(rng, "img.fc", c_in, self.cfg.img_dim)

    def _init_stn(self, rng) -> None:
        c_in = 3
        for i, c in enumerate(self.cfg.stn_widths):
            self._linear(rng, f"stn.conv{i}", c_in, c, relu_gain=True, bias=False)
            self._bn(f"stn.bn{i}", c)
            c_in = c
        # zero-initialised so the predicted transform starts at the identity
        self._param("stn.fc.w", np.zeros((c_in, 9)))
        self._param("stn.fc.b", np.zeros(9))

    def _init_points(self, rng) -> None:
        c_in = 3
        for i, c in enumerate(self.cfg.pc_widths):
            self._linear(rng, f"pc.conv{i}", c_in, c, relu_gain=True, bias=False)
            self._bn(f"pc.bn{i}", c)
            c_in = c

    def _init_gps(self, rng) -> None:
        d_h = self.cfg.gps_dim
        bound = 1.0 / math.sqrt(d_h)
        for name in GRU_PARAM_NAMES:
            if name.startswith("W"):
                self._param(f"gps.{name}", _uniform(rng, (3, d_h), bound))
            elif name.startswith("U"):
                self._param(f"gps.{name}", _uniform(rng, (d_h, d_h), bound))
            else:
                self._param(f"gps.{name}", np.zeros(d_h))

    def _init_fusion(self, rng) -> None:
        cfg = self.cfg
        dims = {"image": cfg.img_dim, "cloud": cfg.pc_dim, "gps": cfg.gps_dim}
        for name, present in zip(MODALITIES, cfg.modalities):
            if present:
                self._linear(rng, f"fuse.proj.{name}", dims[name], cfg.d_fused)
        self._linear(rng, "fuse.score", 3 * cfg.d_fused, 3)
        self._linear(rng, "head.fc1", cfg.d_fused, HEAD_HIDDEN, relu_gain=True)
        self._linear(rng, "head.fc2", HEAD_HIDDEN, 1)

    # -- bookkeeping ------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def train(self, mode: bool = True) -> "MFEFNet":
        self.training = mode
        return self

    def eval(self) -> "MFEFNet":
        return self.train(False)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def _bn_apply(self, x: Tensor, name: str, channel_axis: int) -> Tensor:
        return ops.batchnorm(
            x, self.p(f"{name}.gamma"), self.p(f"{name}.beta"), self.bn[name],
            self.training, channel_axis=channel_axis,
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data.copy() for name, t in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean.copy()
            out[f"{name}.running_var"] = st.running_var.copy()
        out["label.mean"] = np.array([self.label_mean])
        out["label.std"] = np.array([self.label_std])
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise ContractError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} vs {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)
        for name, st in self.bn.items():
            st.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            st.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)
        self.label_mean = float(state["label.mean"][0])
        self.label_std = float(state["label.std"][0])

    # -- encoders ---------------------------------------------------------
    def image_encoder(self, img: Tensor) -> Tensor:
        if img.ndim != 4 or img.shape[1] != 3:
            raise ShapeError(f"image_encoder: expected (B, 3, H, W), got {img.shape}")
        if img.shape[2] < 32 or img.shape[3] < 32:
            raise ShapeError(f"image_encoder: input {img.shape} below the 32x32 minimum")
        x = ops.conv2d(img, self.p("img.stem.w"), stride=1, pad=1)
        x = ops.relu(self._bn_apply(x, "img.stem.bn", 1))
        for s in range(4):
            for b in range(2):
                pre = f"img.s{s}.b{b}"
                stride = 2 if (s > 0 and b == 0) else 1
                y = ops.conv2d(x, self.p(f"{pre}.conv1.w"), stride=stride, pad=1)
                y = ops.relu(self._bn_apply(y, f"{pre}.bn1", 1))
                y = ops.conv2d(y, self.p(f"{pre}.conv2.w"), stride=1, pad=1)
                y = self._bn_apply(y, f"{pre}.bn2", 1)
                if f"{pre}.proj.w" in self.params:
                    sc = ops.conv2d(x, self.p(f"{pre}.proj.w"), stride=stride, pad=0)
                    sc = self._bn_apply(sc, f"{pre}.proj.bn", 1)
                else:
                    sc = x
                x = ops.relu(ops.add(y, sc))
        pooled = ops.mean_over_axis(x, (2, 3))
        return ops.linear(pooled, self.p("img.fc.w"), self.p("img.fc.b"))

    def _shared_mlp(self, pts: Tensor, prefix: str, bn_prefix: str, n_layers: int) -> Tensor:
        x = pts
        for i in range(n_layers):
            x = ops.pointwise_conv1d(x, self.p(f"{prefix}{i}.w"))
            x = ops.relu(self._bn_apply(x, f"{bn_prefix}{i}", -1))
        return x

    def stn(self, pts: Tensor) -> Tensor:
        """Predict a (B, 3, 3) transform; the identity is added to the head output."""
        if "stn.fc.w" not in self.params:
            raise ContractError("model was built with use_stn = false")
        if pts.ndim != 3 or pts.shape[2] != 3 or pts.shape[1] < 1:
            raise ContractError(f"stn: expected non-empty (B, N, 3) cloud, got {pts.shape}")
        feat = ops.max_over_points(self._shared_mlp(pts, "stn.conv", "stn.bn", len(self.cfg.stn_widths)))
        flat = ops.linear(feat, self.p("stn.fc.w"), self.p("stn.fc.b"))
        eye = Tensor(np.eye(3).reshape(9))
        return ops.reshape(ops.add(flat, eye), (pts.shape[0], 3, 3))

    def point_encoder(self, pts: Tensor) -> Tensor:
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ShapeError(f"point_encoder: expected (B, N, 3), got {pts.shape}")
        if pts.shape[1] < 1:
            raise ShapeError("point_encoder: cloud tensor has no points")
        if self.cfg.use_stn:
            pts = ops.matmul(pts, self.stn(pts))
        x = self._shared_mlp(pts, "pc.conv", "pc.bn", len(self.cfg.pc_widths))
        return ops.max_over_points(x)

    def gps_encoder(self, track: Tensor) -> Tensor:
        if track.ndim != 3 or track.shape[2] != 3 or track.shape[1] < 1:
            raise ShapeError(f"gps_encoder: expected (B, T>=1, 3), got {track.shape}")
        params = {name: self.p(f"gps.{name}") for name in GRU_PARAM_NAMES}
        return gru_sequence(track, params)

    # -- fusion and head --------------------------------------------------
    def attention_fuse(self, feats: Sequence[Tensor | None], mask: Sequence[bool]) -> tuple[Tensor, FusionTrace]:
        mask = tuple(bool(m) for m in mask)
        if len(mask) != 3 or not any(mask):
            raise ContractError(f"attention_fuse needs at least one modality, mask={mask}")
        batch = next(f.shape[0] for f, m in zip(feats, mask) if m and f is not None)
        d = self.cfg.d_fused
        projs: list[Tensor] = []
        for name, feat, on in zip(MODALITIES, feats, mask):
            if on:
                if feat is None:
                    raise ContractError(f"modality {name} is enabled but no feature was given")
                proj = ops.linear(feat, self.p(f"fuse.proj.{name}.w"), self.p(f"fuse.proj.{name}.b"))
            else:
                proj = Tensor(np.zeros((batch, d)))
            projs.append(proj)
        logits = ops.linear(ops.concat(projs, axis=1), self.p("fuse.score.w"), self.p("fuse.score.b"))
        weights = ops.softmax(logits, axis=1, mask=np.array(mask)[None, :])
        stacked = ops.concat([ops.reshape(p_, (batch, 1, d)) for p_ in projs], axis=1)
        fused = ops.reshape(ops.matmul(ops.reshape(weights, (batch, 1, 3)), stacked), (batch, d))
        trace = FusionTrace(
            weights.data.copy(),
            {name: p_.data.copy() for name, p_, on in zip(MODALITIES, projs, mask) if on},
        )
        return fused, trace

    def head(self, fused: Tensor) -> Tensor:
        h = ops.relu(ops.linear(fused, self.p("head.fc1.w"), self.p("head.fc1.b")))
        out = ops.linear(h, self.p("head.fc2.w"), self.p("head.fc2.b"))
        return ops.reshape(out, (out.shape[0],))

    def forward(
        self,
        image: np.ndarray | Tensor | None,
        cloud: np.ndarray | Tensor | None,
        gps: np.ndarray | Tensor | None,
        mask: Sequence[bool] | None = None,
    ) -> tuple[Tensor, FusionTrace]:
        """Standardized prediction (B,) for a batch; masked modalities are never read."""
        mask = tuple(self.cfg.modalities if mask is None else (bool(m) for m in mask))
        for name, want, have in zip(MODALITIES, mask, self.cfg.modalities):
            if want and not have:
                raise ContractError(f"mask enables {name} but the model has no {name} encoder")
        feats: list[Tensor | None] = [None, None, None]
        if mask[0]:
            feats[0] = self.image_encoder(_as_tensor(image))
        if mask[1]:
            feats[1] = self.point_encoder(_as_tensor(cloud))
        if mask[2]:
            feats[2] = self.gps_encoder(_as_tensor(gps))
        fused, trace = self.attention_fuse(feats, mask)
        return self.head(fused), trace


def _as_tensor(x) -> Tensor:
    if x is None:
        raise ContractError("modality enabled but its tensor is missing")
    return x if isinstance(x, Tensor) else Tensor(x)


def init_model(cfg: ModelConfig) -> MFEFNet:
    return MFEFNet(cfg)


def image_encoder(model: MFEFNet, img) -> Tensor:
    return _unbatch(model.image_encoder(_batch(img, 3)))


def stn(model: MFEFNet, pts) -> Tensor:
    return _unbatch(model.stn(_batch(pts, 2)))


def point_encoder(model: MFEFNet, pts) -> Tensor:
    return _unbatch(model.point_encoder(_batch(pts, 2)))


def gps_encoder(model: MFEFNet, track) -> Tensor:
    return _unbatch(model.gps_encoder(_batch(track, 2)))


def attention_fuse(model: MFEFNet, feats, mask) -> tuple[Tensor, FusionTrace]:
    batched = [None if f is None else _batch(f, 1) for f in feats]
    fused, trace = model.attention_fuse(batched, mask)
    return _unbatch(fused), trace


def predict_pl(model: MFEFNet, inp) -> tuple[float, FusionTrace]:
    """Path loss in dB for one preprocessed sample (a ``ModelInput``)."""
    if model.training:
        raise ContractError("predict_pl runs in eval mode; call model.eval() first")
    out, trace = model.forward(
        inp.image_tensor[None] if inp.modality_mask[0] else None,
        inp.point_tensor[None] if inp.modality_mask[1] else None,
        inp.gps_tensor[None] if inp.modality_mask[2] else None,
        mask=inp.modality_mask,
    )
    return float(out.data[0]) * model.label_std + model.label_mean, trace


def _batch(x, unbatched_ndim: int) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == unbatched_ndim:
        return ops.reshape(t, (1,) + t.shape)
    return t


def _unbatch(t: Tensor) -> Tensor:
    if t.shape[0] == 1:
        return ops.reshape(t, t.shape[1:])
    return t
