"""Gated recurrent unit built from differentiable ops."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import ShapeError
from . import ops
from .tensor import Tensor

GRU_PARAM_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def gru_cell(x_t: Tensor, h_prev: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """One GRU step.

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    h~ = tanh(x W_h + (r * h) U_h + b_h)
    h' = (1 - z) * h + z * h~

    Weights are stored (in, out), so ``x @ W`` maps (B, D_in) to (B, D_h).
    """
    d_in = params["W_z"].shape[0]
    d_h = params["U_z"].shape[0]
    if x_t.ndim != 2 or x_t.shape[1] != d_in:
        raise ShapeError(f"gru_cell: input shape {x_t.shape} does not match W shape {params['W_z'].shape}")
    if h_prev.shape != (x_t.shape[0], d_h):
        raise ShapeError(f"gru_cell: hidden shape {h_prev.shape} does not match U shape {params['U_z'].shape}")

    z = ops.sigmoid(ops.add(ops.linear(x_t, params["W_z"], params["b_z"]), ops.linear(h_prev, params["U_z"])))
    r = ops.sigmoid(ops.add(ops.linear(x_t, params["W_r"], params["b_r"]), ops.linear(h_prev, params["U_r"])))
    cand = ops.tanh(
        ops.add(
            ops.linear(x_t, params["W_h"], params["b_h"]),
            ops.linear(ops.mul(r, h_prev), params["U_h"]),
        )
    )
    # (1 - z) * h + z * h~  ==  h + z * (h~ - h)
    return ops.add(h_prev, ops.mul(z, ops.sub(cand, h_prev)))


def gru_sequence(seq: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Run ``gru_cell`` over (B, T, D_in) from a zero state; return the last hidden state."""
    if seq.ndim != 3 or seq.shape[1] < 1:
        raise ShapeError(f"gru_sequence: expected (B, T>=1, D), got {seq.shape}")
    d_h = params["U_z"].shape[0]
    h = Tensor(np.zeros((seq.shape[0], d_h)))
    for t in range(seq.shape[1]):
        h = gru_cell(ops.select(seq, 1, t), h, params)
    return h

