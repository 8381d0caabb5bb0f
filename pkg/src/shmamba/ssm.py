"""Selective state-space machinery: ZOH discretization, scans, and the Mamba block.

Shapes follow the block's notation: batch B, sequence N, model width C,
inner width M (= expansion * C) and state size L.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear
from .tensor import DomainError, ShapeError, Tensor

TAYLOR_CUTOFF = 1e-4
DEFAULT_STATE = 16
DEFAULT_CONV_WIDTH = 4
DEFAULT_EXPANSION = 2
DELTA_INIT_RANGE = (1e-3, 1e-1)


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


def zoh_discretize(A: Tensor, B: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization, elementwise with broadcasting.

    ``A_bar = exp(delta*A)`` and ``B_bar = (exp(delta*A) - 1)/(delta*A) * delta*B``;
    below ``|delta*A| < 1e-4`` the ratio uses ``1 + delta*A/2``.
    """
    A, B, delta = T.as_tensor(A), T.as_tensor(B), T.as_tensor(delta)
    if np.any(delta.data <= 0):
        raise DomainError("zoh_discretize needs delta > 0")
    if np.any(A.data >= 0):
        raise DomainError("zoh_discretize needs A < 0")
    a, b, d = A.data, B.data, delta.data
    u = d * a
    e = np.exp(u)
    small = np.abs(u) < TAYLOR_CUTOFF
    us = np.where(small, -1.0, u)  # placeholder keeps the unused branch finite
    phi = np.where(small, 1.0 + 0.5 * u, np.expm1(us) / us)
    dphi = np.where(small, 0.5, (us * np.exp(us) - np.expm1(us)) / (us * us))
    a_bar = np.broadcast_to(e, np.broadcast_shapes(u.shape, b.shape))
    b_bar = phi * d * b
    a_bar = np.array(a_bar)

    def vjp_a(g):
        return (
            T._unbroadcast(g * d * e, a.shape),
            None,
            T._unbroadcast(g * a * e, d.shape),
        )

    def vjp_b(g):
        return (
            T._unbroadcast(g * dphi * d * d * b, a.shape),
            T._unbroadcast(g * phi * d, b.shape),
            T._unbroadcast(g * (dphi * u + phi) * b, d.shape),
        )

    out_a = T.record("zoh_a", a_bar, (A, B, delta), vjp_a)
    out_b = T.record("zoh_b", b_bar, (A, B, delta), vjp_b)
    return out_a, out_b


# ---------------------------------------------------------------------------
# scans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanInputs:
    A_bar: Tensor  # (B, N, M, L)
    B_bar: Tensor  # (B, N, M, L)
    C: Tensor  # (B, N, L)
    x: Tensor  # (B, N, M)

    def __post_init__(self):
        a, b, c, x = self.A_bar.shape, self.B_bar.shape, self.C.shape, self.x.shape
        if len(a) != 4 or a != b:
            raise ShapeError(f"A_bar {a} and B_bar {b} must share a (B, N, M, L) shape")
        if c != (a[0], a[1], a[3]):
            raise ShapeError(f"C has shape {c}, expected {(a[0], a[1], a[3])}")
        if x != a[:3]:
            raise ShapeError(f"x has shape {x}, expected {a[:3]}")


def _readout(h: np.ndarray, c: np.ndarray) -> np.ndarray:
    # y = <C_t, h_t> over the state axis; shared by both scans so results agree bitwise
    return (h * c[..., None, :]).sum(axis=-1)


def _scan_vjp(s: ScanInputs, hs: np.ndarray):
    a, b, c, x = s.A_bar.data, s.B_bar.data, s.C.data, s.x.data

    def vjp(g):
        n = a.shape[1]
        dh = np.zeros_like(hs)
        run = np.zeros_like(hs[:, 0])
        for t in range(n - 1, -1, -1):
            run = run + g[:, t, :, None] * c[:, t, None, :]
            dh[:, t] = run
            run = run * a[:, t]
        h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        g_a = dh * h_prev
        g_b = dh * x[..., None]
        g_c = np.einsum("bnm,bnml->bnl", g, hs)
        g_x = (dh * b).sum(axis=-1)
        return g_a, g_b, g_c, g_x

    return vjp


def _record_scan(kind: str, s: ScanInputs, hs: np.ndarray) -> Tensor:
    y = _readout(hs, s.C.data)
    return T.record(kind, y, (s.A_bar, s.B_bar, s.C, s.x), _scan_vjp(s, hs))


def selective_scan_naive(s: ScanInputs) -> Tensor:
    """Literal recurrence ``h_t = A_bar_t h_{t-1} + B_bar_t x_t``, ``y_t = <C_t, h_t>``, h_0 = 0."""
    a, b, x = s.A_bar.data, s.B_bar.data, s.x.data
    bsz, n, m, l = a.shape
    hs = np.empty((bsz, n, m, l))
    h = np.zeros((bsz, m, l))
    for t in range(n):
        h = a[:, t] * h + b[:, t] * x[:, t, :, None]
        hs[:, t] = h
    return _record_scan("scan_naive", s, hs)


def selective_scan_chunked(s: ScanInputs, chunk: int = 64) -> Tensor:
    """Two-level scan: independent local scans per chunk, then a carry pass.

    Each chunk is scanned from a zero state while tracking the running
    product of ``A_bar``; all chunks advance together. A short sequential
    pass then threads the true state across chunk boundaries, and every
    position receives ``prefix_product * carry_in``.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    a, b, x = s.A_bar.data, s.B_bar.data, s.x.data
    bsz, n, m, l = a.shape
    n_chunks = -(-n // chunk)
    pad = n_chunks * chunk - n
    u = b * x[..., None]
    if pad:
        a = np.concatenate([a, np.ones((bsz, pad, m, l))], axis=1)
        u = np.concatenate([u, np.zeros((bsz, pad, m, l))], axis=1)
    a = a.reshape(bsz, n_chunks, chunk, m, l)
    u = u.reshape(bsz, n_chunks, chunk, m, l)

    local = np.empty_like(u)
    prod = np.empty_like(a)
    h = np.zeros((bsz, n_chunks, m, l))
    p = np.ones((bsz, n_chunks, m, l))
    for j in range(chunk):
        h = a[:, :, j] * h + u[:, :, j]
        p = p * a[:, :, j]
        local[:, :, j] = h
        prod[:, :, j] = p

    carry_in = np.zeros((bsz, n_chunks, m, l))
    carry = np.zeros((bsz, m, l))
    for i in range(n_chunks):
        carry_in[:, i] = carry
        carry = prod[:, i, -1] * carry + local[:, i, -1]

    hs = local + prod * carry_in[:, :, None]
    hs = hs.reshape(bsz, n_chunks * chunk, m, l)[:, :n]
    return _record_scan("scan_chunked", s, hs)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


@dataclass
class SsmParams:
    """Input-dependent SSM core shared by Mamba blocks and fusion branches.

    ``A = -exp(a_log)`` is diagonal per (channel, state) and stays negative
    under any update of ``a_log``.
    """

    conv_kernels: Tensor  # (M, W)
    B_proj: Linear  # M -> L
    C_proj: Linear  # M -> L
    delta_proj: Linear  # M -> M, no bias
    delta_bias: Tensor  # (M,)
    a_log: Tensor  # (M, L)

    @classmethod
    def init(cls, rng: np.random.Generator, inner: int, state: int, conv_width: int) -> "SsmParams":
        bound = 1.0 / np.sqrt(conv_width)
        kernels = Tensor(rng.uniform(-bound, bound, size=(inner, conv_width)), requires_grad=True)
        dt = rng.uniform(*DELTA_INIT_RANGE, size=inner)
        a_log = np.log(np.tile(np.arange(1, state + 1, dtype=np.float64), (inner, 1)))
        return cls(
            conv_kernels=kernels,
            B_proj=Linear.init(rng, inner, state),
            C_proj=Linear.init(rng, inner, state),
            delta_proj=Linear.init(rng, inner, inner, bias=False),
            delta_bias=Tensor(_inverse_softplus(dt), requires_grad=True),
            a_log=Tensor(a_log, requires_grad=True),
        )

    @property
    def inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def state(self) -> int:
        return self.a_log.shape[1]

    def A(self) -> Tensor:
        return T.neg(T.exp(self.a_log))


@dataclass
class MambaBlockParams:
    norm: LayerNorm
    in_proj_x: Linear  # C -> M
    in_proj_z: Linear  # C -> M
    ssm: SsmParams
    out_proj: Linear  # M -> C

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        width: int,
        expansion: int = DEFAULT_EXPANSION,
        state: int = DEFAULT_STATE,
        conv_width: int = DEFAULT_CONV_WIDTH,
    ) -> "MambaBlockParams":
        inner = expansion * width
        return cls(
            norm=LayerNorm.init(width),
            in_proj_x=Linear.init(rng, width, inner),
            in_proj_z=Linear.init(rng, width, inner),
            ssm=SsmParams.init(rng, inner, state, conv_width),
            out_proj=Linear.init(rng, inner, width),
        )

    @property
    def width(self) -> int:
        return self.in_proj_x.d_in


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def selective_ssm(x: Tensor, p: SsmParams, trace: dict | None = None, chunk: int | None = None) -> Tensor:
    """Conv + SiLU, input-dependent (B, C, delta), discretize and scan. Returns y of shape (B, N, M)."""
    if x.ndim != 3 or x.shape[-1] != p.inner:
        raise ShapeError(f"ssm input must be (B, N, {p.inner}), got {x.shape}")
    xc = T.silu(T.depthwise_causal_conv1d(x, p.conv_kernels))
    b_sel = p.B_proj(xc)  # (B, N, L)
    c_sel = p.C_proj(xc)  # (B, N, L)
    delta = T.softplus(p.delta_proj(xc) + p.delta_bias)  # (B, N, M)
    bsz, n, m = xc.shape
    a_bar, b_bar = zoh_discretize(
        p.A(),
        T.reshape(b_sel, (bsz, n, 1, p.state)),
        T.reshape(delta, (bsz, n, m, 1)),
    )
    s = ScanInputs(a_bar, b_bar, c_sel, xc)
    y = selective_scan_naive(s) if chunk is None else selective_scan_chunked(s, chunk)
    if trace is not None:
        trace.update(x_conv=xc, B=b_sel, C=c_sel, delta=delta, A_bar=a_bar, B_bar=b_bar, y=y)
    return y


def mamba_block_forward(t_prev: Tensor, p: MambaBlockParams, trace: dict | None = None) -> Tensor:
    """One Mamba block: (B, N, C) -> (B, N, C) with a residual connection."""
    if t_prev.ndim != 3 or t_prev.shape[-1] != p.width:
        raise ShapeError(f"mamba block expects (B, N, {p.width}), got {t_prev.shape}")
    normed = p.norm(t_prev)
    x = p.in_proj_x(normed)
    z = p.in_proj_z(normed)
    y = selective_ssm(x, p.ssm, trace)
    gated = y * T.silu(z)
    out = p.out_proj(gated) + t_prev
    if trace is not None:
        trace.update(normed=normed, x=x, z=z, y_gated=gated)
    return out
