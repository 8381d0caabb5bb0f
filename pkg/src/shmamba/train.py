"""Adam, training and evaluation loops, the scan benchmark, and ablation sweeps.

Metric stream (``metrics.jsonl``), one JSON object per line with sorted keys::

    step        int    optimizer steps taken so far
    epoch       int
    l_align     float  alignment loss of the step's batch
    l_qa        float  answer loss of the step's batch
    total       float
    batch_acc   float  training-mode accuracy on the step's batch
    train_acc   float|null  eval-mode accuracy on the whole training split
    eval_acc    float|null  eval-mode accuracy on the held-out split
    k           float  realized curvature
    grad_norm   float  global gradient norm before clipping
    clipped     bool   whether clipping rescaled the gradient

Wall-clock times go to ``timing.jsonl`` (``step``, ``wall_clock``) so the
metric stream itself stays bitwise reproducible.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Batch, FeatureBundle, collate, load_bundles, read_manifest
from .model import (
    ModelConfig,
    SHMambaParams,
    compute_losses,
    count_params,
    init_params,
    load_checkpoint,
    save_checkpoint,
    shmamba_forward,
)
from .ssm import ScanInputs, selective_scan_chunked
from .tensor import NonFiniteError, ShapeError, Tape, Tensor


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter is {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, bool]:
    """Rescale ``grads`` in place so their joint l2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
        return norm, True
    return norm, False


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    max_steps: int | None = None
    eval_every: int = 0  # 0: evaluate only after the last step

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1, lr > 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    @classmethod
    def desk(cls, seed: int, **overrides) -> "TrainConfig":
        """Batch 8, 500 steps at a higher constant learning rate."""
        base = {"epochs": 63, "batch_size": 8, "lr": 3e-3, "max_steps": 500, "eval_every": 50}
        return cls(seed=seed, **{**base, **overrides})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    step: int
    epoch: int
    l_align: float
    l_qa: float
    total: float
    batch_acc: float
    k: float
    grad_norm: float
    clipped: bool
    train_acc: float | None = None
    eval_acc: float | None = None
    wall_clock: float = 0.0

    def metrics(self) -> dict:
        d = dataclasses.asdict(self)
        del d["wall_clock"]
        return d


@dataclass
class TrainResult:
    params: SHMambaParams
    cfg: ModelConfig
    records: list[RunRecord]
    train_acc: float
    eval_acc: float | None
    checkpoint: Path | None = None


def iterate_batches(bundles: Sequence[FeatureBundle], batch_size: int, order: Iterable[int] | None = None):
    idx = list(range(len(bundles))) if order is None else list(order)
    for start in range(0, len(idx), batch_size):
        yield collate([bundles[i] for i in idx[start : start + batch_size]])


def predict(params: SHMambaParams, cfg: ModelConfig, bundles: Sequence[FeatureBundle], batch_size: int = 64) -> np.ndarray:
    """Eval-mode argmax predictions, in input order."""
    preds = []
    for batch in iterate_batches(bundles, batch_size):
        out = shmamba_forward(batch, cfg, params, train=False)
        preds.append(np.argmax(out.logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _set_accuracy(params, cfg, bundles) -> float | None:
    if not bundles:
        return None
    labels = np.array([b.label for b in bundles])
    return float(np.mean(predict(params, cfg, bundles) == labels))


def _split_bundles(manifest) -> tuple[list[FeatureBundle], list[FeatureBundle]]:
    return load_bundles(manifest, "train"), load_bundles(manifest, "eval")


def check_shapes(cfg: ModelConfig, manifest) -> None:
    shapes = read_manifest(manifest)["shapes"]
    want = {"audio": cfg.d_audio_in, "visual": cfg.d_visual_in, "question": cfg.d_question_in}
    for key, width in want.items():
        if shapes[key][-1] != width:
            raise ShapeError(f"manifest {key} width {shapes[key][-1]} does not match config width {width}")
    vocab = len(read_manifest(manifest)["vocab"])
    if vocab != cfg.vocab_size:
        raise ShapeError(f"manifest vocab has {vocab} answers, config says {cfg.vocab_size}")


def train_step(
    batch: Batch, cfg: ModelConfig, params: SHMambaParams, state: OptimState,
    rng: np.random.Generator, clip_norm: float, step: int,
):
    named = dict(params.named())
    try:
        with Tape() as tape:
            lb, _ = compute_losses(batch, cfg, params, train=True, rng=rng)
        grad_map = tape.backward(lb.total)
    except NonFiniteError as exc:
        raise NumericalAbort(f"non-finite value at step {step}: {exc}") from exc
    if not np.isfinite(lb.total.item()):
        raise NumericalAbort(f"non-finite loss at step {step}")
    grads = {name: grad_map[t] for name, t in named.items()}
    norm, clipped = clip_global_norm(grads, clip_norm)
    try:
        adam_step(named, grads, state)
    except NumericalAbort as exc:
        raise NumericalAbort(f"step {step}: {exc}") from exc
    return lb, norm, clipped


def train_loop(
    manifest, cfg: ModelConfig, tcfg: TrainConfig, out_dir: str | os.PathLike | None = None,
) -> TrainResult:
    """Train on the manifest's ``train`` split and report accuracy on its ``eval`` split.

    With ``out_dir`` set, writes ``metrics.jsonl``, ``timing.jsonl`` and a
    final checkpoint under ``out_dir/checkpoint``.
    """
    check_shapes(cfg, manifest)
    train_set, eval_set = _split_bundles(manifest)
    if not train_set:
        raise ValueError("manifest has no training samples")
    params = init_params(cfg, tcfg.seed)
    state = OptimState(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.adam_eps)
    shuffle_rng = np.random.default_rng([tcfg.seed, 1])
    dropout_rng = np.random.default_rng([tcfg.seed, 2])

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = timing_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
        timing_fh = open(out / "timing.jsonl", "w")

    records: list[RunRecord] = []
    max_steps = tcfg.max_steps if tcfg.max_steps is not None else float("inf")
    t0 = time.perf_counter()
    step = 0
    try:
        for epoch in range(tcfg.epochs):
            if step >= max_steps:
                break
            order = shuffle_rng.permutation(len(train_set))
            for batch in iterate_batches(train_set, tcfg.batch_size, order):
                if step >= max_steps:
                    break
                lb, norm, clipped = train_step(batch, cfg, params, state, dropout_rng, tcfg.clip_norm, step)
                step += 1
                rec = RunRecord(
                    step=step, epoch=epoch, l_align=lb.l_align.item(), l_qa=lb.l_qa.item(),
                    total=lb.total.item(), batch_acc=lb.accuracy, k=lb.k_used,
                    grad_norm=norm, clipped=clipped,
                )
                if tcfg.eval_every and step % tcfg.eval_every == 0:
                    rec.train_acc = _set_accuracy(params, cfg, train_set)
                    rec.eval_acc = _set_accuracy(params, cfg, eval_set)
                rec.wall_clock = time.perf_counter() - t0
                records.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec.metrics(), sort_keys=True) + "\n")
                    metrics_fh.flush()
                    timing_fh.write(json.dumps({"step": step, "wall_clock": rec.wall_clock}) + "\n")
                    timing_fh.flush()
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            timing_fh.close()

    if records and records[-1].train_acc is not None:
        train_acc, eval_acc = records[-1].train_acc, records[-1].eval_acc
    else:
        train_acc = _set_accuracy(params, cfg, train_set)
        eval_acc = _set_accuracy(params, cfg, eval_set)
    ckpt = None
    if out is not None:
        summary = {"steps": step, "train_acc": train_acc, "eval_acc": eval_acc}
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
        ckpt = save_checkpoint(out / "checkpoint", params, cfg, tcfg.seed, {"train": tcfg.to_dict(), "steps": step})
    return TrainResult(params, cfg, records, train_acc, eval_acc, ckpt)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    n: int
    per_type: dict[str, float]
    per_type_n: dict[str, int]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_params(
    params: SHMambaParams, cfg: ModelConfig, bundles: Sequence[FeatureBundle], type_names: Sequence[str] | None = None
) -> EvalResult:
    if not bundles:
        raise ValueError("nothing to evaluate")
    preds = predict(params, cfg, bundles)
    labels = np.array([b.label for b in bundles])
    qtypes = np.array([b.query_type for b in bundles])
    hit = preds == labels
    per_type, per_n = {}, {}
    for q in np.unique(qtypes):
        name = type_names[q] if type_names is not None and q < len(type_names) else str(q)
        sel = qtypes == q
        per_type[name] = float(np.mean(hit[sel]))
        per_n[name] = int(sel.sum())
    return EvalResult(float(np.mean(hit)), len(bundles), per_type, per_n)


def evaluate(checkpoint, manifest, split: str | None = None) -> EvalResult:
    """Dropout-free accuracy of a saved checkpoint, overall and per query type."""
    params, cfg, _ = load_checkpoint(checkpoint)
    check_shapes(cfg, manifest)
    names = read_manifest(manifest).get("query_types")
    return evaluate_params(params, cfg, load_bundles(manifest, split), names)


# ---------------------------------------------------------------------------
# scan benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchRow:
    length: int
    median: float
    ratio: float | None
    timings: list[float]


def random_scan_inputs(rng: np.random.Generator, batch: int, length: int, inner: int, state: int) -> ScanInputs:
    shape = (batch, length, inner, state)
    return ScanInputs(
        Tensor(rng.uniform(0.5, 0.999, size=shape)),
        Tensor(rng.normal(scale=0.1, size=shape)),
        Tensor(rng.normal(size=(batch, length, state))),
        Tensor(rng.normal(size=(batch, length, inner))),
    )


def bench_scan(
    lengths: Sequence[int], trials: int = 5, batch: int = 2, inner: int = 32, state: int = 16,
    chunk: int = 64, seed: int = 0,
) -> list[BenchRow]:
    """Median forward time of the chunked scan per sequence length.

    ``ratio`` is each median divided by the previous row's median.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    for n in lengths:
        s = random_scan_inputs(rng, batch, n, inner, state)
        selective_scan_chunked(s, chunk)  # warm-up
        timings = []
        for _ in range(trials):
            t = time.perf_counter()
            selective_scan_chunked(s, chunk)
            timings.append(time.perf_counter() - t)
        med = float(np.median(timings))
        ratio = med / rows[-1].median if rows else None
        rows.append(BenchRow(n, med, ratio, timings))
    return rows


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _run_summary(res: TrainResult) -> dict:
    last = res.records[-1] if res.records else None
    return {
        "final_total": last.total if last else None,
        "final_k": last.k if last else None,
        "train_acc": res.train_acc,
        "eval_acc": res.eval_acc,
    }


def sweep_curvature(
    k0_values: Sequence[float], cfg: ModelConfig, tcfg: TrainConfig, manifest, out_dir: str | os.PathLike | None = None
) -> list[dict]:
    """Train one model per initial curvature with shared seed and data."""
    for k0 in k0_values:
        if not k0 < 0:
            raise ValueError(f"k0 values must be negative, got {k0}")
    rows = []
    for i, k0 in enumerate(k0_values):
        run_dir = None if out_dir is None else Path(out_dir) / f"k0_{i:02d}"
        res = train_loop(manifest, dataclasses.replace(cfg, k0=float(k0)), tcfg, run_dir)
        rows.append({"k0": float(k0), **_run_summary(res)})
    return rows


def sweep_blocks(
    n_values: Sequence[int], cfg: ModelConfig, tcfg: TrainConfig, manifest, out_dir: str | os.PathLike | None = None
) -> list[dict]:
    """Train one model per Mamba-block count; ``n=0`` drops the stacks entirely."""
    for n in n_values:
        if n < 0:
            raise ValueError(f"block counts must be >= 0, got {n}")
    rows = []
    for i, n in enumerate(n_values):
        run_cfg = dataclasses.replace(cfg, n_blocks=int(n))
        run_dir = None if out_dir is None else Path(out_dir) / f"n_{i:02d}"
        res = train_loop(manifest, run_cfg, tcfg, run_dir)
        rows.append({"n_blocks": int(n), "params": count_params(run_cfg)[0], **_run_summary(res)})
    return rows


def write_csv(rows: Sequence[dict], path: str | os.PathLike, columns: Sequence[str] | None = None) -> None:
    cols = list(columns) if columns is not None else (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in cols])
