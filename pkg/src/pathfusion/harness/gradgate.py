"""Finite-difference gate over every differentiable op and the full model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..engine import BatchNormState, GradCheckReport, Tensor, grad_check, gru_cell, ops
from ..mfef import MFEFNet, ModelConfig

Case = tuple[str, Callable[[], Tensor], list[Tensor]]


def _projected(out_fn: Callable[[], Tensor], shape_rng: np.random.Generator) -> Callable[[], Tensor]:
    """Scalarise an op output with a fixed random projection so every entry matters."""
    cache: dict[str, Tensor] = {}

    def f() -> Tensor:
        out = out_fn()
        if "w" not in cache:
            cache["w"] = Tensor(shape_rng.standard_normal(out.shape))
        return ops.sum_all(ops.mul(out, cache["w"]))

    return f


def op_cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)

    def t(*shape, scale=1.0, name=None):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, name=name)

    cases: list[Case] = []

    def add_case(name, fn, inputs):
        cases.append((name, _projected(fn, np.random.default_rng([seed, len(cases)])), inputs))

    a, b = t(3, 4), t(3, 4)
    add_case("add", lambda: ops.add(a, b), [a, b])
    a2, bias = t(3, 4), t(4)
    add_case("add_broadcast", lambda: ops.add(a2, bias), [a2, bias])
    a3, b3 = t(3, 4), t(3, 4)
    add_case("sub", lambda: ops.sub(a3, b3), [a3, b3])
    a4, b4 = t(3, 4), t(3, 4)
    add_case("mul", lambda: ops.mul(a4, b4), [a4, b4])
    a5 = t(3, 4)
    add_case("scale", lambda: ops.scale(a5, -2.5), [a5])
    a6 = t(2, 6)
    add_case("reshape", lambda: ops.reshape(a6, (3, 4)), [a6])
    a7 = t(2, 3, 4)
    add_case("transpose", lambda: ops.transpose(a7, (2, 0, 1)), [a7])
    a8 = t(2, 3, 4)
    add_case("select", lambda: ops.select(a8, 1, 2), [a8])
    c1, c2 = t(2, 3), t(2, 2)
    add_case("concat", lambda: ops.concat([c1, c2], axis=1), [c1, c2])
    m1, m2 = t(3, 4), t(4, 5)
    add_case("matmul", lambda: ops.matmul(m1, m2), [m1, m2])
    bm1, bm2 = t(2, 3, 4), t(2, 4, 2)
    add_case("matmul_batched", lambda: ops.matmul(bm1, bm2), [bm1, bm2])
    lx, lw, lb = t(3, 4), t(4, 5), t(5)
    add_case("linear", lambda: ops.linear(lx, lw, lb), [lx, lw, lb])
    px, pw, pb = t(2, 5, 3), t(3, 4), t(4)
    add_case("pointwise_conv1d", lambda: ops.pointwise_conv1d(px, pw, pb), [px, pw, pb])
    for stride, pad, k in ((1, 1, 3), (2, 1, 3), (2, 0, 1)):
        cx, cw, cb = t(2, 2, 6, 6), t(3, 2, k, k), t(3)
        add_case(
            f"conv2d_s{stride}_p{pad}_k{k}",
            lambda cx=cx, cw=cw, cb=cb, s=stride, p=pad: ops.conv2d(cx, cw, cb, stride=s, pad=p),
            [cx, cw, cb],
        )
    r = t(4, 5)
    add_case("relu", lambda: ops.relu(r), [r])
    s = t(4, 5)
    add_case("sigmoid", lambda: ops.sigmoid(s), [s])
    th = t(4, 5)
    add_case("tanh", lambda: ops.tanh(th), [th])
    sm = t(3, 4)
    add_case("softmax", lambda: ops.softmax(sm, axis=1), [sm])
    smm = t(3, 3)
    mask = np.array([[True, False, True], [True, True, True], [False, False, True]])
    add_case("softmax_masked", lambda: ops.softmax(smm, axis=1, mask=mask), [smm])
    mp = t(2, 2, 4, 4)
    add_case("maxpool2d", lambda: ops.maxpool2d(mp, 2), [mp])
    mop = t(2, 6, 3)
    add_case("max_over_points", lambda: ops.max_over_points(mop), [mop])
    mo = t(2, 3, 4)
    add_case("mean_over_axis", lambda: ops.mean_over_axis(mo, (1, 2)), [mo])
    bx, bg, bbeta = t(4, 3, 2, 2), t(3), t(3)
    add_case(
        "batchnorm_train",
        lambda: ops.batchnorm(bx, bg, bbeta, BatchNormState.fresh(3), True, channel_axis=1),
        [bx, bg, bbeta],
    )
    ex, eg, ebeta = t(4, 3), t(3), t(3)
    st = BatchNormState(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))
    add_case("batchnorm_eval", lambda: ops.batchnorm(ex, eg, ebeta, st, False, channel_axis=1), [ex, eg, ebeta])
    mp_, mt = t(5), rng.standard_normal(5)
    cases.append(("mse_loss", lambda: ops.mse_loss(mp_, mt), [mp_]))
    names = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")
    gp = {n: t(*((3, 4) if n[0] == "W" else (4, 4) if n[0] == "U" else (4,)), scale=0.5) for n in names}
    gx, gh = t(2, 3), t(2, 4)
    add_case("gru_cell", lambda: gru_cell(gx, gh, gp), [gx, gh] + [gp[n] for n in names])
    return cases


def model_case(seed: int = 0) -> Case:
    """Full forward + MSE loss of a width-0.125 model on a tiny batch."""
    cfg = ModelConfig(width_mult=0.125, gps_window=3, seed=seed)
    model = MFEFNet(cfg)
    rng = np.random.default_rng([seed, 99])
    image = rng.uniform(0, 1, (2, 3, 32, 32))
    cloud = rng.standard_normal((2, 16, 3)) * 5
    gps = rng.standard_normal((2, 3, 3)) * 0.3
    target = rng.standard_normal(2)

    def f() -> Tensor:
        pred, _ = model.forward(image, cloud, gps)
        return ops.mse_loss(pred, target)

    params = model.parameters()
    for name, p in model.params.items():
        p.name = name
    return "mfef_forward_loss", f, params


def run_gradient_gate(seed: int = 0, tol: float = 1e-4, include_model: bool = True) -> list[tuple[str, GradCheckReport]]:
    results = []
    for name, f, inputs in op_cases(seed):
        results.append((name, grad_check(f, inputs, tol=tol, seed=seed)))
    if include_model:
        name, f, params = model_case(seed)
        results.append((name, grad_check(f, params, eps=(1e-5, 1e-6, 1e-4), tol=tol, max_coords=64, seed=seed)))
    return results
