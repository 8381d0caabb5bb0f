"""End-to-end model: encoders, hyperbolic alignment, Mamba stacks, fusion, answer head.

Parameter names (as written to checkpoints)::

    encoder.{audio,visual,question}.{weight,bias}
    curvature.proj.{weight,bias}
    audio_blocks.<i>.<block param>     visual_blocks.<i>.<block param>
    fusion.<fusion param>
    fuse.{weight,bias}                 head.{weight,bias}

Closed-form parameter count, with H = d_hidden, M = expansion*H, L = state,
W = conv width, C = vocab, D_* = input widths and n = n_blocks::

    ssm core   S = M*W + 2*(M+1)*L + M*M + M + M*L
    block      2H + 2*(H+1)*M + S + (M+1)*H
    fusion     2*(2H + (H+1)*M + S) + (H+1)*M + 2*(M+1)*H
    total      (D_a+1)*H + (D_v+1)*H + (D_q+1)*H     encoders
               + 2H + 1                              curvature head
               + 2n * block + fusion
               + (2H+1)*H + (H+1)*C                  fuse, head
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Batch, read_tensor_file, write_tensor_file
from .fusion import GATE_SOURCES, CrossFusionParams, cross_fusion_forward
from .hyperbolic import NORM_MODES, CurvatureHead, adaptive_curvature, alignment_loss
from .layers import Linear, named_parameters
from .ssm import MambaBlockParams, mamba_block_forward
from .tensor import ShapeError, Tensor

ALIGN_TAPS = ("encoder", "mamba")
CHECKPOINT_FORMAT = "shmamba-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_audio_in: int = 128
    d_visual_in: int = 512
    d_question_in: int = 512
    d_hidden: int = 256
    n_blocks: int = 4
    dropout: float = 0.1
    k0: float = -0.1
    vocab_size: int = 42
    state: int = 16
    conv_width: int = 4
    expansion: int = 2
    norm_mode: str = "row-l2"
    gate_source: str = "visual"
    align_tap: str = "encoder"

    def __post_init__(self):
        dims = (self.d_audio_in, self.d_visual_in, self.d_question_in, self.d_hidden,
                self.vocab_size, self.state, self.conv_width, self.expansion)
        if min(dims) < 1:
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.k0 < 0:
            raise ValueError(f"k0 must be negative, got {self.k0}")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}")
        if self.gate_source not in GATE_SOURCES:
            raise ValueError(f"gate_source must be one of {GATE_SOURCES}")
        if self.align_tap not in ALIGN_TAPS:
            raise ValueError(f"align_tap must be one of {ALIGN_TAPS}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small preset for single-core runs: H=64 and 128-wide inputs for every modality."""
        base = {"d_hidden": 64, "d_audio_in": 128, "d_visual_in": 128, "d_question_in": 128}
        return cls(**{**base, **overrides})

    @property
    def inner(self) -> int:
        return self.expansion * self.d_hidden

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Encoders:
    audio: Linear
    visual: Linear
    question: Linear


@dataclass
class SHMambaParams:
    encoder: Encoders
    curvature: CurvatureHead
    audio_blocks: list[MambaBlockParams]
    visual_blocks: list[MambaBlockParams]
    fusion: CrossFusionParams
    fuse: Linear  # 2H -> H
    head: Linear  # H -> C

    def named(self) -> list[tuple[str, Tensor]]:
        return list(named_parameters(self))


def init_params(cfg: ModelConfig, seed: int) -> SHMambaParams:
    rng = np.random.default_rng(seed)
    h = cfg.d_hidden
    enc = Encoders(
        Linear.init(rng, cfg.d_audio_in, h),
        Linear.init(rng, cfg.d_visual_in, h),
        Linear.init(rng, cfg.d_question_in, h),
    )
    block = lambda: MambaBlockParams.init(rng, h, cfg.expansion, cfg.state, cfg.conv_width)  # noqa: E731
    return SHMambaParams(
        encoder=enc,
        curvature=CurvatureHead.init(rng, h),
        audio_blocks=[block() for _ in range(cfg.n_blocks)],
        visual_blocks=[block() for _ in range(cfg.n_blocks)],
        fusion=CrossFusionParams.init(rng, h, cfg.expansion, cfg.state, cfg.conv_width, cfg.gate_source),
        fuse=Linear.init(rng, 2 * h, h),
        head=Linear.init(rng, h, cfg.vocab_size),
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    l_align: Tensor
    l_qa: Tensor
    total: Tensor
    k_used: float
    accuracy: float

    def floats(self) -> dict:
        return {
            "l_align": self.l_align.item(),
            "l_qa": self.l_qa.item(),
            "total": self.total.item(),
            "k": self.k_used,
            "accuracy": self.accuracy,
        }


@dataclass
class ForwardResult:
    logits: Tensor
    l_align: Tensor
    k_used: float
    extras: dict = field(default_factory=dict)


def _check_batch(batch: Batch, cfg: ModelConfig) -> None:
    want = {"audio": cfg.d_audio_in, "visual": cfg.d_visual_in, "question": cfg.d_question_in}
    for name, width in want.items():
        got = getattr(batch, name).shape[-1]
        if got != width:
            raise ShapeError(f"{name} features have width {got}, config expects {width}")


def encode_features(
    batch: Batch, cfg: ModelConfig, enc: Encoders, train: bool = False, rng: np.random.Generator | None = None
) -> tuple[Tensor, Tensor, Tensor]:
    """Project each modality to ``d_hidden``; dropout is applied in train mode only."""
    _check_batch(batch, cfg)
    outs = []
    for layer, x in ((enc.audio, batch.audio), (enc.visual, batch.visual), (enc.question, batch.question)):
        outs.append(T.dropout(layer(Tensor(x)), cfg.dropout, rng, train))
    return outs[0], outs[1], outs[2]


def shmamba_forward(
    batch: Batch, cfg: ModelConfig, params: SHMambaParams, train: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardResult:
    """Run the whole model on a batch; returns logits (B, C) and the alignment loss.

    Alignment needs at least two samples to form similarity matrices; for a
    single-sample batch it is reported as 0.
    """
    a, v, q = encode_features(batch, cfg, params.encoder, train, rng)

    def align(a_tap: Tensor, v_tap: Tensor) -> tuple[Tensor, float]:
        c = adaptive_curvature(a_tap, v_tap, params.curvature, cfg.k0)
        if a_tap.shape[0] < 2:
            return T.zeros(()), c.value
        return alignment_loss(v_tap, a_tap, c, cfg.norm_mode), c.value

    if cfg.align_tap == "encoder":
        l_align, k_used = align(a, v)
    for blk in params.audio_blocks:
        a = mamba_block_forward(a, blk)
    for blk in params.visual_blocks:
        v = mamba_block_forward(v, blk)
    if cfg.align_tap == "mamba":
        l_align, k_used = align(a, v)

    ta, tv = cross_fusion_forward(a, v, params.fusion)
    f_av = T.concat([T.mean(ta, axis=1), T.mean(tv, axis=1)], axis=-1)
    m = params.fuse(f_av) * q
    logits = params.head(m)
    return ForwardResult(logits, l_align, k_used)


def answer_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``logits`` (B, C)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ShapeError(f"logits {logits.shape} do not match {labels.size} labels")
    n_cls = logits.shape[1]
    bad = labels[(labels < 0) | (labels >= n_cls)]
    if bad.size:
        raise ValueError(f"labels out of range [0, {n_cls}): {bad.tolist()}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return T.neg(T.sum(T.log_softmax(logits, axis=-1) * onehot)) / float(labels.size)


def total_loss(l_align: Tensor, l_qa: Tensor) -> Tensor:
    return l_align + l_qa


def accuracy(logits: Tensor | np.ndarray, labels) -> float:
    data = logits.data if isinstance(logits, Tensor) else logits
    return float(np.mean(np.argmax(data, axis=-1) == np.asarray(labels)))


def compute_losses(
    batch: Batch, cfg: ModelConfig, params: SHMambaParams, train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[LossBreakdown, ForwardResult]:
    out = shmamba_forward(batch, cfg, params, train, rng)
    l_qa = answer_loss(out.logits, batch.labels)
    total = total_loss(out.l_align, l_qa)
    return LossBreakdown(out.l_align, l_qa, total, out.k_used, accuracy(out.logits, batch.labels)), out


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def count_params(cfg: ModelConfig) -> tuple[int, dict[str, int]]:
    """Exact learnable-scalar count from the closed form in the module docstring."""
    h, m, l, w, c = cfg.d_hidden, cfg.inner, cfg.state, cfg.conv_width, cfg.vocab_size
    ssm_core = m * w + 2 * (m + 1) * l + m * m + m + m * l
    block = 2 * h + 2 * (h + 1) * m + ssm_core + (m + 1) * h
    branch = 2 * h + (h + 1) * m + ssm_core
    parts = {
        "encoder": (cfg.d_audio_in + 1) * h + (cfg.d_visual_in + 1) * h + (cfg.d_question_in + 1) * h,
        "curvature": 2 * h + 1,
        "audio_blocks": cfg.n_blocks * block,
        "visual_blocks": cfg.n_blocks * block,
        "fusion": 2 * branch + (h + 1) * m + 2 * (m + 1) * h,
        "fuse": (2 * h + 1) * h,
        "head": (h + 1) * c,
    }
    return sum(parts.values()), parts


def count_instantiated(params: SHMambaParams) -> dict[str, int]:
    """Per-module counts by walking an actual parameter tree."""
    out: dict[str, int] = {}
    for name, t in params.named():
        top = name.split(".", 1)[0]
        out[top] = out.get(top, 0) + t.size
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _param_file(name: str) -> str:
    return f"params/{name}.sht"


def save_checkpoint(
    path: str | os.PathLike, params: SHMambaParams, cfg: ModelConfig, seed: int, extra: dict | None = None
) -> Path:
    """Write every parameter as a tensor file plus ``checkpoint.json``."""
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in params.named():
        write_tensor_file(root / _param_file(name), t)
        entries.append({"name": name, "file": _param_file(name), "shape": list(t.shape)})
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "seed": seed,
        "parameters": entries,
        "extra": extra or {},
    }
    (root / "checkpoint.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return root


def load_checkpoint(path: str | os.PathLike) -> tuple[SHMambaParams, ModelConfig, dict]:
    root = Path(path)
    doc = json.loads((root / "checkpoint.json").read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{root}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
    cfg = ModelConfig.from_dict(doc["config"])
    params = init_params(cfg, int(doc["seed"]))
    slots = dict(params.named())
    stored = {e["name"]: e for e in doc["parameters"]}
    if set(stored) != set(slots):
        missing, extra = sorted(set(slots) - set(stored)), sorted(set(stored) - set(slots))
        raise ValueError(f"{root}: parameter names differ (missing {missing}, unexpected {extra})")
    for name, t in slots.items():
        arr = read_tensor_file(root / stored[name]["file"])
        if arr.shape != t.shape:
            raise ShapeError(f"{root}: {name} has shape {arr.shape}, config implies {t.shape}")
        t.data = arr
    return params, cfg, doc
