"""Poincaré-ball geometry, adaptive curvature and the hyperbolic alignment loss.

Curvature is negative; the ball has radius ``1/sqrt(|k|)``. All maps act
row-wise on the last axis and accept a curvature held as a scalar Tensor,
so gradients flow into whatever produced ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear
from .tensor import DomainError, ShapeError, Tensor

DEFAULT_EPS = 1e-5
DEFAULT_K0 = -0.1
NORM_MODES = ("row-l2", "frobenius")

# |logit| cap before the curvature sigmoid; sigmoid(30) < 1 in float64
_LOGIT_CAP = 30.0
_BOUNDARY_CLAMP = 1.0 - 1e-12
_SERIES_CUTOFF = 1e-4


class DegenerateFeatureError(ValueError):
    """A feature row has zero norm, so its cosine similarity is undefined."""


class CurvatureMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Curvature:
    k: Tensor
    eps: float = DEFAULT_EPS
    k0: float = DEFAULT_K0

    def __post_init__(self):
        k = self.k if isinstance(self.k, Tensor) else Tensor(self.k)
        object.__setattr__(self, "k", k)
        if k.size != 1:
            raise ShapeError(f"curvature must be a scalar, got shape {k.shape}")
        if not k.item() < 0:
            raise DomainError(f"curvature must be negative, got {k.item()}")
        if not 0 < self.eps < 1e-2:
            raise ValueError(f"eps must lie in (0, 1e-2), got {self.eps}")
        if not self.k0 < 0:
            raise DomainError(f"k0 must be negative, got {self.k0}")

    @property
    def value(self) -> float:
        return self.k.item()

    @property
    def radius(self) -> float:
        """Clipping radius ``(1 - eps)/sqrt(|k|)``."""
        return (1.0 - self.eps) / np.sqrt(-self.value)

    def abs_k(self) -> Tensor:
        return T.neg(self.k)

    def same_as(self, other: "Curvature") -> bool:
        if self is other:
            return True
        return (self.k is other.k or self.value == other.value) and self.eps == other.eps


@dataclass(frozen=True)
class PoincarePoint:
    v: Tensor
    curvature: Curvature
    projected: bool = False


@dataclass(frozen=True)
class TangentVector:
    v: Tensor
    curvature: Curvature


@dataclass(frozen=True)
class SimilarityMatrix:
    w: Tensor


def conformal_factor(z: np.ndarray, k: float) -> np.ndarray:
    """``2 / (1 - |k| ||z||^2)``; equals 2 at the origin."""
    return 2.0 / (1.0 - abs(k) * np.sum(np.square(z), axis=-1))


def _sqnorm(x: Tensor) -> Tensor:
    return T.sum(T.square(x), axis=-1, keepdims=True)


def project_to_ball(x: Tensor, c: Curvature) -> PoincarePoint:
    """Clip rows of ``x`` to norm ``(1 - eps)/sqrt(|k|)``; interior rows pass through unchanged."""
    r2 = (1.0 - c.eps) ** 2 / c.abs_k()
    sq = _sqnorm(x)
    # inside: maximum picks r2 and the scale is exactly 1
    scale = T.sqrt(r2 / T.maximum(sq, r2))
    return PoincarePoint(x * scale, c, projected=True)


def mobius_add(z: PoincarePoint, x: PoincarePoint) -> PoincarePoint:
    c = z.curvature
    if not c.same_as(x.curvature):
        raise CurvatureMismatchError(
            f"mobius_add curvatures differ: {c.value} vs {x.curvature.value}"
        )
    ak = c.abs_k()
    zv, xv = z.v, x.v
    zx = T.sum(zv * xv, axis=-1, keepdims=True)
    zz = _sqnorm(zv)
    xx = _sqnorm(xv)
    two_k_zx = 2.0 * ak * zx
    num = (1.0 + two_k_zx + ak * xx) * zv + (1.0 - ak * zz) * xv
    den = 1.0 + two_k_zx + T.square(ak) * zz * xx
    return project_to_ball(num / den, c)


def _series(q: np.ndarray, coeffs) -> np.ndarray:
    out = np.zeros_like(q)
    for a in reversed(coeffs):
        out = out * q + a
    return out


def artanh_ratio(q: Tensor) -> Tensor:
    """``artanh(sqrt(q))/sqrt(q)`` for ``0 <= q < 1``; 1 at q = 0."""
    qd = q.data
    if np.any(qd < 0) or np.any(qd >= 1):
        raise DomainError("artanh argument outside [0, 1)")
    small = qd < _SERIES_CUTOFF
    qs = np.where(small, 0.5, qd)  # placeholder keeps the unused branch finite
    s = np.sqrt(qs)
    exact = np.arctanh(s) / s
    val = np.where(small, _series(qd, (1.0, 1 / 3, 1 / 5, 1 / 7, 1 / 9)), exact)
    d_exact = (1.0 / (1.0 - qs) - exact) / (2.0 * qs)
    deriv = np.where(small, _series(qd, (1 / 3, 2 / 5, 3 / 7, 4 / 9)), d_exact)
    return T.record("artanh_ratio", val, (q,), lambda g: (g * deriv,))


def tanh_ratio(q: Tensor) -> Tensor:
    """``tanh(sqrt(q))/sqrt(q)`` for ``q >= 0``; 1 at q = 0."""
    qd = q.data
    if np.any(qd < 0):
        raise DomainError("tanh_ratio needs q >= 0")
    small = qd < _SERIES_CUTOFF
    qs = np.where(small, 0.5, qd)
    s = np.sqrt(qs)
    th = np.tanh(s)
    exact = th / s
    val = np.where(small, _series(qd, (1.0, -1 / 3, 2 / 15, -17 / 315, 62 / 2835)), exact)
    d_exact = ((1.0 - th * th) - exact) / (2.0 * qs)
    deriv = np.where(small, _series(qd, (-1 / 3, 4 / 15, -51 / 315, 248 / 2835)), d_exact)
    return T.record("tanh_ratio", val, (q,), lambda g: (g * deriv,))


def log_map_zero(x: PoincarePoint) -> TangentVector:
    """Logarithmic map at the origin, ``artanh(sqrt|k| ||x||) x / (sqrt|k| ||x||)``.

    Raw points on or beyond the boundary raise; projected points are
    interior by construction and only get a roundoff guard.
    """
    c = x.curvature
    q = c.abs_k() * _sqnorm(x.v)
    if np.any(q.data >= 1.0):
        if not x.projected:
            raise DomainError("point lies on or outside the Poincaré ball boundary")
        q = T.clip(q, 0.0, _BOUNDARY_CLAMP)
    return TangentVector(x.v * artanh_ratio(q), c)


def exp_map_zero(v: TangentVector) -> PoincarePoint:
    c = v.curvature
    q = c.abs_k() * _sqnorm(v.v)
    return PoincarePoint(v.v * tanh_ratio(q), c)


@dataclass
class CurvatureHead:
    """The single linear layer mapping pooled (audio, visual) features to a curvature logit."""

    proj: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, d_hidden: int) -> "CurvatureHead":
        return cls(Linear.init(rng, 2 * d_hidden, 1))


def adaptive_curvature(
    a: Tensor, v: Tensor, head: CurvatureHead, k0: float = DEFAULT_K0, eps: float = DEFAULT_EPS
) -> Curvature:
    """``k = k0 * sigmoid(Linear(concat(mean a, mean v)))`` pooled over batch and time."""
    if a.shape != v.shape or a.ndim != 3:
        raise ShapeError(f"adaptive_curvature needs matching (B, T, H) inputs, got {a.shape} and {v.shape}")
    if head.proj.d_in != 2 * a.shape[-1]:
        raise ShapeError(f"curvature head expects {head.proj.d_in // 2} features, got {a.shape[-1]}")
    k_av = T.concat([T.mean(a, axis=(0, 1)), T.mean(v, axis=(0, 1))], axis=0)
    logit = T.clip(head.proj(k_av), -_LOGIT_CAP, _LOGIT_CAP)
    k = T.reshape(k0 * T.sigmoid(logit), ())
    return Curvature(k, eps=eps, k0=k0)


def cosine_similarity_matrix(feats: Tensor) -> SimilarityMatrix:
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ShapeError(f"need a (B, D) feature batch with B >= 2, got {feats.shape}")
    sq = _sqnorm(feats)
    zero = np.flatnonzero(sq.data.reshape(-1) == 0.0)
    if zero.size:
        raise DegenerateFeatureError(f"zero-norm feature rows: {zero.tolist()}")
    unit = feats / T.sqrt(sq)
    return SimilarityMatrix(T.matmul(unit, T.transpose(unit)))


def normalize_similarity(w: SimilarityMatrix, mode: str = "row-l2") -> Tensor:
    if mode == "row-l2":
        return w.w / T.sqrt(_sqnorm(w.w))
    if mode == "frobenius":
        return w.w / T.sqrt(T.sum(T.square(w.w)))
    raise ValueError(f"unknown normalization {mode!r}; expected one of {NORM_MODES}")


def matrix_alignment_loss(w_v_norm: Tensor, w_a_norm: Tensor) -> Tensor:
    """Mean elementwise squared difference of two normalized similarity matrices."""
    if w_v_norm.shape != w_a_norm.shape:
        raise ShapeError(f"similarity shapes differ: {w_v_norm.shape} vs {w_a_norm.shape}")
    return T.mean(T.square(w_v_norm - w_a_norm))


def tangent_features(feats: Tensor, c: Curvature) -> TangentVector:
    """Mean-pool over time, project into the ball, and map to the tangent space at 0."""
    pooled = T.mean(feats, axis=1)
    return log_map_zero(project_to_ball(pooled, c))


def alignment_loss(
    v_feats: Tensor, a_feats: Tensor, c: Curvature, norm: str = "row-l2"
) -> Tensor:
    """Hyperbolic alignment loss between two (B, T, H) feature batches.

    Both maps rescale each row by a positive factor, so the cosine
    similarities (and hence this loss) come out independent of ``k`` up to
    roundoff.
    """
    if v_feats.shape != a_feats.shape or v_feats.ndim != 3:
        raise ShapeError(f"alignment_loss needs matching (B, T, H) inputs, got {v_feats.shape} and {a_feats.shape}")
    w_v = cosine_similarity_matrix(tangent_features(v_feats, c).v)
    w_a = cosine_similarity_matrix(tangent_features(a_feats, c).v)
    return matrix_alignment_loss(normalize_similarity(w_v, norm), normalize_similarity(w_a, norm))
