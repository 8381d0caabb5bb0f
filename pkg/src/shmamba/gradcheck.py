"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor

__all__ = ["grad_check", "grad_check_many", "grad_check_tensors"]


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def grad_check_tensors(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    coords: Sequence[Sequence[int] | None] | None = None,
) -> float:
    """Check ``f`` (a closure over ``tensors``) against central differences.

    Each tensor's ``data`` is perturbed in place one coordinate at a time and
    restored afterwards. Returns the max over checked coordinates of
    ``|g_tape - g_fd| / max(1, |g_fd|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    originals = [t.data for t in tensors]
    flags = [t.requires_grad for t in tensors]
    try:
        for t in tensors:
            t.data = np.array(t.data, dtype=np.float64)
            t.requires_grad = True
        with Tape() as tape:
            out = f()
        _scalar(out)
        grads = tape.backward(out)

        worst = 0.0
        for k, t in enumerate(tensors):
            g_tape = grads[t].reshape(-1)
            flat = t.data.reshape(-1)
            sel = None if coords is None else coords[k]
            for i in range(flat.size) if sel is None else sel:
                orig = flat[i]
                vals = []
                for step in (eps, -eps):
                    flat[i] = orig + step
                    try:
                        vals.append(_scalar(f()))
                    except NonFiniteError as exc:
                        raise NonFiniteError("grad_check", f"f not finite at coordinate {i}") from exc
                flat[i] = orig
                g_fd = (vals[0] - vals[1]) / (2.0 * eps)
                worst = max(worst, abs(g_tape[i] - g_fd) / max(1.0, abs(g_fd)))
        return worst
    finally:
        for t, d, r in zip(tensors, originals, flags):
            t.data, t.requires_grad = d, r


def grad_check_many(
    f: Callable[..., Tensor],
    points: Sequence[np.ndarray | Tensor],
    eps: float = 1e-5,
    coords: Sequence[Sequence[int] | None] | None = None,
) -> float:
    """Like :func:`grad_check` for a function of several tensors."""
    leaves = [Tensor(p.data if isinstance(p, Tensor) else p) for p in points]
    return grad_check_tensors(lambda: f(*leaves), leaves, eps, coords)


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``point`` and central differences."""
    return grad_check_many(f, [point], eps)
