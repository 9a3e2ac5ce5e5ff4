"""Tensor value type and the reverse-mode tape."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation.

    Tensors produced by an op keep references to their parents and a closure
    mapping the output gradient to parent gradients.  Nothing is recorded when
    no parent requires a gradient, so inference builds no graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- properties ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, params: Iterable["Tensor"] | None = None) -> None:
        backward(self, params=params)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # -- operator sugar (implemented in ops) ------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, _lift(other))

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _lift(other))

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, _lift(other))


_grad_enabled = [True]


@contextmanager
def no_grad():
    """Run forward passes without recording the graph (evaluation)."""
    prev = _grad_enabled[0]
    _grad_enabled[0] = False
    try:
        yield
    finally:
        _grad_enabled[0] = prev


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    return _lift(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op output, recording it on the graph when any parent needs a gradient."""
    # a NaN or inf anywhere poisons the sum, so one reduction checks every entry
    if not np.isfinite(np.add.reduce(data, axis=None)):
        raise NumericError(f"{op} produced a non-finite value")
    out = Tensor(data)
    out.op = op
    if _grad_enabled[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


@dataclass
class Tape:
    """Ordered record of the ops in a loss's ancestry (parents before children)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None and n.requires_grad]


def backward(loss: Tensor, tape: Tape | None = None, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaves must have ``grad is None`` on entry (call ``zero_grad`` between
    steps); a leftover gradient raises rather than silently accumulating.
    Tensors in ``params`` that the loss does not depend on receive zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else []
    if not loss.requires_grad:
        for p in params:
            _check_fresh(p)
            p.grad = np.zeros_like(p.data)
        return
    tape = tape if tape is not None else Tape.from_loss(loss)
    leaves = tape.leaves()
    for leaf in leaves:
        _check_fresh(leaf)
    for p in params:
        _check_fresh(p)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def _check_fresh(t: Tensor) -> None:
    if t.grad is not None:
        name = t.name or repr(t)
        raise ContractError(
            f"gradient of {name} was not reset before backward; call zero_grad() "
            "to avoid silent accumulation"
        )


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
