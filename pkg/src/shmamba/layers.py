"""Parameter containers shared by the model components.

Parameter groups are plain dataclasses whose fields are Tensors, nested
groups, or lists of groups. :func:`named_parameters` walks them in field
order and yields stable dotted names (``blocks.0.in_proj_x.weight``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class Linear:
    """Affine map ``x @ weight + bias`` with weight stored as (in, out)."""

    weight: Tensor
    bias: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True) -> "Linear":
        bound = 1.0 / np.sqrt(d_in)
        w = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True)
        b = Tensor(rng.uniform(-bound, bound, size=(d_out,)), requires_grad=True) if bias else None
        return cls(w, b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise T.ShapeError(f"linear layer expects width {self.d_in}, got input {x.shape}")
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y

    def zero_(self) -> "Linear":
        self.weight.data = np.zeros_like(self.weight.data)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)
        return self


@dataclass
class LayerNorm:
    """Per-token normalization over the last axis with learned scale and shift."""

    scale: Tensor
    shift: Tensor
    eps: float = dataclasses.field(default=1e-5, metadata={"static": True})

    @classmethod
    def init(cls, width: int) -> "LayerNorm":
        return cls(Tensor(np.ones(width), requires_grad=True), Tensor(np.zeros(width), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = T.mean(T.square(xc), axis=-1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.scale + self.shift


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every Tensor inside ``obj``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            value = getattr(obj, f.name)
            if value is None:
                continue
            yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def parameter_count(obj) -> int:
    return sum(t.size for _, t in named_parameters(obj))
