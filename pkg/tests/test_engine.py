import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pathfusion.engine import (
    Adam,
    BatchNormState,
    OptimizerState,
    Tensor,
    adam_step,
    backward,
    grad_check,
    gru_cell,
    gru_sequence,
    load_checkpoint,
    no_grad,
    ops,
    save_checkpoint,
    zero_grad,
)
from pathfusion.engine.recurrent import GRU_PARAM_NAMES
from pathfusion.errors import ContractError, CorruptionError, FormatError, NumericError, ShapeError
from pathfusion.harness.gradgate import op_cases

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def param(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# --- forward semantics -----------------------------------------------------


def test_softmax_equal_logits():
    out = ops.softmax(Tensor(np.zeros(3)), axis=0)
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


@given(arrays(np.float64, (4, 5), elements=finite), st.floats(-100, 100))
def test_softmax_properties(x, c):
    p = ops.softmax(Tensor(x), axis=1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(ops.softmax(Tensor(x + c), axis=1).data, p, atol=1e-9)


def test_softmax_mask_gives_exact_zero_and_no_gradient():
    x = param([[1.0, 2.0, 3.0]])
    mask = np.array([[True, False, True]])
    out = ops.softmax(x, axis=1, mask=mask)
    assert out.data[0, 1] == 0.0
    backward(ops.sum_all(ops.mul(out, Tensor(np.array([[1.0, 5.0, -2.0]])))))
    assert x.grad[0, 1] == 0.0
    with pytest.raises(ShapeError):
        ops.softmax(Tensor(np.zeros((1, 2))), axis=1, mask=np.zeros((1, 2), bool))


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 7, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = ops.conv2d(Tensor(x), Tensor(w), stride=1, pad=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_loop_reference():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 6))
    ref = np.zeros((4, 6))
    for i in range(4):
        for j in range(6):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, ref, atol=1e-12)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_non_finite_result_raises():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        ops.mul(Tensor(np.array([1e200])), Tensor(np.array([1e200])))


@given(arrays(np.float64, (6, 3, 2), elements=finite))
@settings(max_examples=30)
def test_batchnorm_train_normalises(x):
    x = x + np.linspace(0, 1, 36).reshape(6, 3, 2)  # avoid constant channels
    state = BatchNormState.fresh(3)
    out = ops.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), state, True, channel_axis=1).data
    per_channel = out.transpose(1, 0, 2).reshape(3, -1)
    assert np.all(np.abs(per_channel.mean(axis=1)) < 1e-6)
    var = x.transpose(1, 0, 2).reshape(3, -1).var(axis=1)
    ok = var > 1e-2  # eps only matters for near-constant channels
    np.testing.assert_allclose(per_channel.var(axis=1)[ok], 1.0, atol=1e-6)


def test_batchnorm_running_stats_and_eval():
    x = np.random.default_rng(3).standard_normal((8, 2)) * [2.0, 0.5] + [1.0, -1.0]
    state = BatchNormState.fresh(2)
    ops.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1), atol=1e-15)
    out = ops.batchnorm(Tensor(x[:1]), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, False)
    expected = (x[:1] - state.running_mean) / np.sqrt(state.running_var + state.eps)
    np.testing.assert_allclose(out.data, expected, atol=1e-14)
    with pytest.raises(ShapeError):
        ops.batchnorm(Tensor(x[:1]), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True)


@given(st.permutations(range(7)))
def test_max_over_points_permutation_and_padding(perm):
    pts = np.random.default_rng(4).standard_normal((1, 7, 5))
    base = ops.max_over_points(Tensor(pts)).data
    assert np.array_equal(ops.max_over_points(Tensor(pts[:, list(perm)])).data, base)
    padded = np.concatenate([pts, np.repeat(pts[:, -1:], 4, axis=1)], axis=1)
    assert np.array_equal(ops.max_over_points(Tensor(padded)).data, base)


# --- backward --------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = param(np.arange(5.0))
    backward(ops.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_backward_mse_hand_derivative():
    w, x, y = param([0.7]), 1.3, 2.0
    backward(ops.mse_loss(ops.scale(w, x), np.array([y])))
    assert w.grad[0] == pytest.approx(2 * x * (0.7 * x - y), rel=1e-14)


def test_backward_contracts():
    x = param(np.ones(3))
    with pytest.raises(ContractError):
        backward(ops.scale(x, 2.0))  # non-scalar
    backward(ops.sum_all(x))
    with pytest.raises(ContractError, match="zero_grad"):
        backward(ops.sum_all(x))
    zero_grad([x])
    unused = param(np.ones(2))
    backward(ops.sum_all(x), params=[x, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros(2))


def test_backward_diamond_visits_once():
    x = param([2.0])
    y = ops.mul(x, x)
    loss = ops.sum_all(ops.add(y, y))
    backward(loss)
    assert x.grad[0] == pytest.approx(8.0)


def test_no_grad_builds_no_graph():
    x = param([1.0, 2.0])
    with no_grad():
        y = ops.mul(x, x)
    assert not y.requires_grad and y._parents == ()


@pytest.mark.parametrize("case", op_cases(seed=5), ids=lambda c: c[0])
def test_every_op_passes_grad_check(case):
    _, f, inputs = case
    report = grad_check(f, inputs, eps=1e-5, tol=1e-4)
    assert report.passed, report.lines()


# --- grad_check itself -----------------------------------------------------


def test_grad_check_quadratic():
    x = param([1.0, 2.0, 3.0])
    report = grad_check(lambda: ops.sum_all(ops.mul(x, x)), [x])
    assert report.passed and report.max_rel_err < 1e-8


def test_grad_check_skips_relu_kink():
    x = param([0.0, 1.5, -2.0])
    report = grad_check(lambda: ops.sum_all(ops.relu(x)), [x])
    assert report.passed and report.inputs[0].kinks == 1


def test_grad_check_catches_wrong_gradient():
    from pathfusion.engine.tensor import make_result

    def bad_square(t):
        return make_result(t.data**2, (t,), lambda g: (g * 3 * t.data,), "bad_square")

    x = param([1.0, -2.0, 0.5])
    report = grad_check(lambda: ops.sum_all(bad_square(x)), [x])
    assert not report.passed


# --- GRU -------------------------------------------------------------------


def _gru_params(rng, d_in, d_h, scale=0.5):
    shapes = {"W": (d_in, d_h), "U": (d_h, d_h), "b": (d_h,)}
    return {n: param(rng.standard_normal(shapes[n[0]]) * scale) for n in GRU_PARAM_NAMES}


def test_gru_zero_weights_halves_state():
    params = {n: Tensor(np.zeros(p.shape)) for n, p in _gru_params(np.random.default_rng(0), 2, 3).items()}
    h = np.array([[0.4, -1.0, 2.0]])
    out = gru_cell(Tensor(np.ones((1, 2))), Tensor(h), params)
    np.testing.assert_allclose(out.data, 0.5 * h, atol=1e-15)


def _scalar_gru(xs, p):
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    d_h = p["U_z"].shape[0]
    h = [0.0] * d_h
    for x in xs:
        z, r, hc = [], [], []
        for j in range(d_h):
            z.append(sig(sum(x[i] * p["W_z"][i, j] for i in range(len(x))) + sum(h[k] * p["U_z"][k, j] for k in range(d_h)) + p["b_z"][j]))
            r.append(sig(sum(x[i] * p["W_r"][i, j] for i in range(len(x))) + sum(h[k] * p["U_r"][k, j] for k in range(d_h)) + p["b_r"][j]))
        for j in range(d_h):
            hc.append(np.tanh(sum(x[i] * p["W_h"][i, j] for i in range(len(x))) + sum(r[k] * h[k] * p["U_h"][k, j] for k in range(d_h)) + p["b_h"][j]))
        h = [(1 - z[j]) * h[j] + z[j] * hc[j] for j in range(d_h)]
    return np.array(h)


def test_gru_sequence_matches_scalar_recurrence():
    rng = np.random.default_rng(3)
    params = _gru_params(rng, 3, 4)
    raw = {n: t.data for n, t in params.items()}
    for xs in (np.zeros((5, 3)), np.tile(rng.standard_normal(3), (4, 1))):
        out = gru_sequence(Tensor(xs[None]), params).data[0]
        np.testing.assert_allclose(out, _scalar_gru(xs, raw), atol=1e-12)


def test_gru_shape_errors():
    params = _gru_params(np.random.default_rng(0), 3, 4)
    with pytest.raises(ShapeError):
        gru_cell(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 4))), params)
    with pytest.raises(ShapeError):
        gru_cell(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 5))), params)


# --- Adam ------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = param([1.0, -2.0])
    adam_step([p], [np.zeros(2)], OptimizerState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_by_hand():
    p = param([0.0])
    st_ = OptimizerState(lr=1e-3)
    adam_step([p], [np.array([1.0])], st_)
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    assert p.data[0] == pytest.approx(-1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-15)


def test_adam_two_steps_match_scalar_reference():
    grads = [np.array([0.3, -1.2]), np.array([0.3, -1.2])]
    p = param([0.5, 0.25])
    st_ = OptimizerState()
    for g in grads:
        adam_step([p], [g], st_)
    ref = [0.5, 0.25]
    for i in range(2):
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g[i]
            v = 0.999 * v + 0.001 * g[i] ** 2
            ref[i] -= 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, atol=1e-12)
    assert st_.step == 2


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step([param([1.0])], [np.zeros(2)], OptimizerState())


def test_adam_wrapper_consumes_grads():
    p = param([1.0])
    opt = Adam([p], lr=0.1)
    backward(ops.sum_all(ops.mul(p, p)))
    opt.step()
    opt.zero_grad()
    assert p.grad is None and p.data[0] < 1.0


# --- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip_and_byte_stability(tmp_path):
    rng = np.random.default_rng(0)
    entries = {"a.w": rng.standard_normal((2, 3)), "b": np.array([1.5]), "empty": np.zeros((0, 3))}
    save_checkpoint(tmp_path / "x.ckpt", entries)
    save_checkpoint(tmp_path / "y.ckpt", entries)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    back = load_checkpoint(tmp_path / "x.ckpt")
    assert list(back) == list(entries)
    for k in entries:
        np.testing.assert_array_equal(back[k], entries[k])


def test_checkpoint_corruption(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"w": np.ones((4, 4))})
    data = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-5])
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "h.ckpt").write_bytes(b"NOTACKPT\n" + data)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "h.ckpt")
