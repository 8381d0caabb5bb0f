"""Cross fusion block: two selective-scan branches sharing one gate."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear
from .ssm import DEFAULT_CONV_WIDTH, DEFAULT_EXPANSION, DEFAULT_STATE, SsmParams, selective_ssm
from .tensor import ShapeError, Tensor

GATE_SOURCES = ("visual", "audio")


@dataclass
class FusionBranch:
    """Per-modality half of the block: norm, input projection, SSM core (no own gate)."""

    norm: LayerNorm
    in_proj: Linear  # C -> M
    ssm: SsmParams

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, inner: int, state: int, conv_width: int) -> "FusionBranch":
        return cls(LayerNorm.init(width), Linear.init(rng, width, inner), SsmParams.init(rng, inner, state, conv_width))


@dataclass
class CrossFusionParams:
    audio: FusionBranch
    visual: FusionBranch
    gate: Linear  # C -> M, reads the normalized gate-source stream
    out_audio: Linear  # M -> C
    out_visual: Linear  # M -> C
    gate_source: str = dataclasses.field(default="visual", metadata={"static": True})

    def __post_init__(self):
        if self.gate_source not in GATE_SOURCES:
            raise ValueError(f"gate_source must be one of {GATE_SOURCES}, got {self.gate_source!r}")
        if self.audio.in_proj.d_in != self.visual.in_proj.d_in:
            raise ShapeError("audio and visual branch widths differ")

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        width: int,
        expansion: int = DEFAULT_EXPANSION,
        state: int = DEFAULT_STATE,
        conv_width: int = DEFAULT_CONV_WIDTH,
        gate_source: str = "visual",
    ) -> "CrossFusionParams":
        inner = expansion * width
        return cls(
            audio=FusionBranch.init(rng, width, inner, state, conv_width),
            visual=FusionBranch.init(rng, width, inner, state, conv_width),
            gate=Linear.init(rng, width, inner),
            out_audio=Linear.init(rng, inner, width),
            out_visual=Linear.init(rng, inner, width),
            gate_source=gate_source,
        )

    @property
    def width(self) -> int:
        return self.audio.in_proj.d_in


def cross_fusion_forward(
    ta_prev: Tensor, tv_prev: Tensor, p: CrossFusionParams, trace: dict | None = None
) -> tuple[Tensor, Tensor]:
    """Fuse (B, N, C) audio and visual streams; returns updated (audio, visual).

    Both branches are gated by ``SiLU(z)`` with ``z`` projected from the
    normalized visual stream (or audio, if ``gate_source="audio"``). The
    gated outputs are summed and injected back into each stream through its
    own output projection plus residual.
    """
    if ta_prev.shape != tv_prev.shape:
        raise ShapeError(f"modality shapes differ: {ta_prev.shape} vs {tv_prev.shape}")
    if ta_prev.ndim != 3 or ta_prev.shape[-1] != p.width:
        raise ShapeError(f"cross fusion expects (B, N, {p.width}), got {ta_prev.shape}")
    normed = {}
    ys = {}
    for name, t_prev, branch in (("audio", ta_prev, p.audio), ("visual", tv_prev, p.visual)):
        normed[name] = branch.norm(t_prev)
        ys[name] = selective_ssm(branch.in_proj(normed[name]), branch.ssm)
    z = p.gate(normed[p.gate_source])
    gate = T.silu(z)
    ya = ys["audio"] * gate
    yv = ys["visual"] * gate
    mixed = ya + yv
    ta = p.out_audio(mixed) + ta_prev
    tv = p.out_visual(mixed) + tv_prev
    if trace is not None:
        trace.update(z=z, y_audio=ys["audio"], y_visual=ys["visual"], mixed=mixed)
    return ta, tv
