"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active
(``with Tape() as tape:``), every operation that touches a tensor with
``requires_grad=True`` appends a node to the tape holding its inputs and a
vector-Jacobian closure over the saved forward values. ``tape.backward(loss)``
walks the nodes in reverse recording order.

Non-finite results are never propagated: every operation checks its output
and raises :class:`NonFiniteError` instead.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "GradMap",
    "NonFiniteError",
    "ShapeError",
    "DomainError",
    "tensor",
    "zeros",
    "ones",
    "record",
    "current_tape",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "apply_unary",
    "UNARY_FUNCTIONS",
    "silu",
    "sigmoid",
    "softplus",
    "tanh",
    "exp",
    "log",
    "square",
    "sqrt",
    "reduce",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "depthwise_causal_conv1d",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "maximum",
    "clip",
    "dropout",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinite values."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by {op}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A float64 array that can take part in gradient recording."""

    __array_priority__ = 100.0  # make ndarray <op> Tensor defer to Tensor

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("Tensor", "constructor input")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce(self, axis, "mean", keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()
_ids = itertools.count()


def current_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradMap:
    """Gradients keyed by tensor identity."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node_id in self._grads:
            return self._grads[t.node_id]
        if t.requires_grad:
            return np.zeros_like(t.data)
        raise KeyError("tensor does not require grad")

    def get(self, t: Tensor, default=None):
        return self._grads.get(t.node_id, default)

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        for k, g in self._grads.items():
            yield self._tensors[k], g


@dataclass
class Tape:
    """Ordered record of differentiable operations; single-thread use only."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _handle(self, t: Tensor) -> int:
        if t.node_id is None:
            t.node_id = next(_ids)
        return t.node_id

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, vjp) -> None:
        for t in inputs:
            if t.requires_grad:
                self._handle(t)
        output.node_id = next(_ids)
        output.requires_grad = True
        self.nodes.append(Node(kind, tuple(inputs), output, vjp))

    def backward(self, loss: Tensor) -> GradMap:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or loss.node_id is None:
            return GradMap({}, {})
        produced = {n.output.node_id for n in self.nodes}
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.node_id not in produced:
            leaves[loss.node_id] = loss
        for node in reversed(self.nodes):
            g = grads.pop(node.output.node_id, None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ShapeError(
                        f"{node.kind}: gradient shape {gi.shape} != input shape {t.data.shape}"
                    )
                key = t.node_id
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        out = {k: grads[k] for k in leaves if k in grads}
        return GradMap(out, leaves)


def backward(tape: Tape, loss: Tensor) -> GradMap:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out`` as the result of op ``kind`` and put it on the active tape.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(kind)
    res = Tensor._wrap(np.asarray(out, dtype=DTYPE))
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, res, vjp)
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return record("div", out, (a, b), vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return record(
        "maximum",
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(pick_a, g, 0.0), a.shape),
            _unbroadcast(np.where(pick_a, 0.0, g), b.shape),
        ),
    )


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return record("clip", np.clip(x.data, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


# ---------------------------------------------------------------------------
# unary functions
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


# name -> (forward, derivative(x, y)); derivative returns dy/dx elementwise
UNARY_FUNCTIONS: dict[str, tuple[Callable, Callable]] = {
    "silu": (
        lambda x: x * _sigmoid(x),
        lambda x, y: (s := _sigmoid(x)) * (1.0 + x * (1.0 - s)),
    ),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "softplus": (_softplus, lambda x, y: _sigmoid(x)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "exp": (np.exp, lambda x, y: y),
    "log": (np.log, lambda x, y: 1.0 / x),
    "neg": (np.negative, lambda x, y: -np.ones_like(x)),
    "square": (np.square, lambda x, y: 2.0 * x),
    "sqrt": (np.sqrt, lambda x, y: 0.5 / y),
}


def apply_unary(x: Tensor, fn: str) -> Tensor:
    x = as_tensor(x)
    try:
        fwd, deriv = UNARY_FUNCTIONS[fn]
    except KeyError:
        raise ValueError(f"unknown unary function {fn!r}") from None
    xd = x.data
    if fn == "log" and np.any(xd <= 0):
        raise DomainError("log of non-positive input")
    if fn == "sqrt" and np.any(xd <= 0):
        # derivative is unbounded at 0
        raise DomainError("sqrt of non-positive input")
    if fn == "exp" and np.any(xd > 709.0):
        raise NonFiniteError("exp", "overflow")
    y = fwd(xd)
    return record(fn, y, (x,), lambda g: (g * deriv(xd, y),))


def silu(x):
    return apply_unary(x, "silu")


def sigmoid(x):
    return apply_unary(x, "sigmoid")


def softplus(x):
    return apply_unary(x, "softplus")


def tanh(x):
    return apply_unary(x, "tanh")


def exp(x):
    return apply_unary(x, "exp")


def log(x):
    return apply_unary(x, "log")


def neg(x):
    return apply_unary(x, "neg")


def square(x):
    return apply_unary(x, "square")


def sqrt(x):
    return apply_unary(x, "sqrt")


# ---------------------------------------------------------------------------
# linear algebra, reductions, shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a of shape (..., K) and b of shape (K, N) or (K,).

    Batched right operands of matching leading shape are also accepted.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul needs rank >= 1 operands, got {a.shape} and {b.shape}")
    k_b = b.shape[0] if b.ndim <= 2 else b.shape[-2]
    if a.shape[-1] != k_b:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):
        out = ad @ bd  # overflow surfaces as NonFiniteError in record()

    def vjp(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        if bd.ndim == 2:
            ga = g @ bd.T
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g)
            else:
                a2 = ad.reshape(-1, ad.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", out, (a, b), vjp)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(x: Tensor, axis, mode: str = "sum", keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if mode not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {mode!r}")
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.sum(axis=axes, keepdims=keepdims)
    if mode == "mean":
        out = out / count
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        g = np.broadcast_to(g, shape)
        if mode == "mean":
            g = g / count
        return (np.array(g),)

    return record(mode, out, (x,), vjp)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce(x, axis, "sum", keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce(x, axis, "mean", keepdims)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _norm_axes(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _norm_axes(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", y, (x,), vjp)


def depthwise_causal_conv1d(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel causal convolution along the sequence axis.

    x has shape (B, N, M) and kernels (M, W). The last kernel tap multiplies
    the current step, tap ``W-1-j`` the input ``j`` steps back; the sequence
    is left-padded with ``W-1`` zeros so output ``t`` only sees inputs ``<= t``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 3:
        raise ShapeError(f"conv input must be (B, N, M), got {x.shape}")
    if kernels.ndim != 2 or kernels.shape[0] != x.shape[2]:
        raise ShapeError(f"kernel shape {kernels.shape} does not match {x.shape[2]} channels")
    width = kernels.shape[1]
    if width < 1:
        raise ShapeError("kernel width must be >= 1")
    bsz, n, m = x.shape
    xp = np.concatenate([np.zeros((bsz, width - 1, m)), x.data], axis=1)
    kd = kernels.data
    out = np.zeros_like(x.data)
    for j in range(width):
        out += xp[:, j : j + n, :] * kd[:, j]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for j in range(width):
            gxp[:, j : j + n, :] += g * kd[:, j]
            gk[:, j] = (g * xp[:, j : j + n, :]).sum(axis=(0, 1))
        return gxp[:, width - 1 :, :], gk

    return record("conv1d", out, (x, kernels), vjp)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))
        )

    return record("concat", out, xs, vjp)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    out = np.stack([t.data for t in xs], axis=axis)
    ax = axis % out.ndim
    return record(
        "stack",
        out,
        xs,
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(xs))),
    )


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(
        "transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),)
    )


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record("dropout", x.data * keep, (x,), lambda g: (g * keep,))
