"""Command-line entry point: ``shmamba <subcommand> ...``.

Exit codes: 0 success, 1 usage or input error, 2 numerical abort.

Config files are JSON with optional ``model``, ``train`` and ``data``
sections whose keys are the fields of ModelConfig, TrainConfig (minus
``seed``) and SyntheticSpec. They are applied on top of a preset
(``--preset desk`` by default), then ``--set section.key=value`` overrides
are applied in order; values are parsed as JSON when possible.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .data import ManifestError, SyntheticSpec, TensorFileError, generate_synthetic_dataset
from .model import ModelConfig
from .tensor import ShapeError
from .train import (
    NumericalAbort,
    TrainConfig,
    bench_scan,
    evaluate,
    sweep_blocks,
    sweep_curvature,
    train_loop,
    write_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
PRESETS = ("desk", "full")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(path: str | None, preset: str, overrides: list[str]) -> dict[str, dict]:
    """Merge preset, config file and ``--set`` overrides into plain dicts."""
    if preset == "desk":
        sections = {
            "model": ModelConfig.desk().to_dict(),
            "train": {k: v for k, v in TrainConfig.desk(seed=0).to_dict().items() if k != "seed"},
        }
    else:
        sections = {
            "model": ModelConfig().to_dict(),
            "train": {k: v for k, v in TrainConfig(seed=0).to_dict().items() if k != "seed"},
        }
    m = sections["model"]
    sections["data"] = {
        **dataclasses.asdict(SyntheticSpec()),
        "d_audio": m["d_audio_in"], "d_visual": m["d_visual_in"], "d_question": m["d_question_in"],
        "vocab_size": m["vocab_size"],
    }
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        for name, body in doc.items():
            if name not in sections or not isinstance(body, dict):
                raise UsageError(f"unknown config section {name!r}")
            sections[name].update(body)
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, field = key.partition(".")
        if not sep or not dot or section not in sections:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        sections[section][field] = _parse_value(raw)
    return sections


def _model_cfg(sections) -> ModelConfig:
    return ModelConfig.from_dict(sections["model"])


def _train_cfg(sections, seed: int, args) -> TrainConfig:
    body = dict(sections["train"])
    for flag in ("epochs", "batch_size", "lr", "max_steps"):
        val = getattr(args, flag, None)
        if val is not None:
            body[flag] = val
    if "seed" in body:
        raise UsageError("train.seed is set with --seed, not in the config")
    return TrainConfig.from_dict({**body, "seed": seed})


def _emit(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    print(text)
    if path:
        Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    sections = load_config(args.config, args.preset, args.set)
    body = dict(sections["data"])
    for flag in ("seed", "n_samples", "noise_std", "eval_fraction"):
        val = getattr(args, flag)
        if val is not None:
            body[flag] = val
    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    if set(body) - known:
        raise UsageError(f"unknown data config keys: {sorted(set(body) - known)}")
    path = generate_synthetic_dataset(SyntheticSpec(**body), args.out)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    sections = load_config(args.config, args.preset, args.set)
    res = train_loop(args.manifest, _model_cfg(sections), _train_cfg(sections, args.seed, args), args.out)
    last = res.records[-1] if res.records else None
    _emit(
        {
            "steps": last.step if last else 0,
            "final_total": last.total if last else None,
            "train_acc": res.train_acc,
            "eval_acc": res.eval_acc,
            "checkpoint": str(res.checkpoint),
        },
        None,
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    res = evaluate(args.checkpoint, args.manifest, args.split)
    _emit(res.to_dict(), args.json)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .data import Batch
    from .gradcheck import grad_check_tensors
    from .model import compute_losses, init_params

    cfg = ModelConfig(d_audio_in=3, d_visual_in=5, d_question_in=4, d_hidden=8, n_blocks=1, dropout=0.0,
                      vocab_size=3, state=4, conv_width=4, expansion=2)
    rng = np.random.default_rng(args.seed)
    batch = Batch(rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 5)), rng.normal(size=(2, 4)),
                  rng.integers(0, 3, size=2), np.zeros(2, dtype=np.int64))
    params = init_params(cfg, args.seed)
    tensors = [t for _, t in params.named()]
    coords = None
    if args.coords is not None:
        pick = np.random.default_rng(args.seed)
        coords = [pick.choice(t.size, size=min(args.coords, t.size), replace=False).tolist() for t in tensors]
    err = grad_check_tensors(lambda: compute_losses(batch, cfg, params)[0].total, tensors, args.eps, coords)
    ok = bool(err < args.tol)
    n_checked = sum(t.size for t in tensors) if coords is None else sum(map(len, coords))
    print(json.dumps({"max_rel_error": float(err), "tolerance": args.tol, "coordinates": n_checked, "pass": ok}))
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_bench_scan(args) -> int:
    rows = bench_scan(args.lengths, args.trials, args.batch, args.inner, args.state, args.chunk, args.seed)
    print("length,median_s,ratio")
    for r in rows:
        print(f"{r.length},{r.median:.6f},{'' if r.ratio is None else f'{r.ratio:.3f}'}")
    if args.csv:
        write_csv([dataclasses.asdict(r) | {"timings": " ".join(f"{t:.6f}" for t in r.timings)} for r in rows],
                  args.csv, ["length", "median", "ratio", "timings"])
    return EXIT_OK


def _sweep(args, fn, values, column) -> int:
    sections = load_config(args.config, args.preset, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = fn(values, _model_cfg(sections), _train_cfg(sections, args.seed, args), args.manifest, out)
    cols = [column] + (["params"] if column == "n_blocks" else []) + ["final_total", "final_k", "train_acc", "eval_acc"]
    write_csv(rows, out / "summary.csv", cols)
    print((out / "summary.csv").read_text(), end="")
    return EXIT_OK


def cmd_sweep_curvature(args) -> int:
    return _sweep(args, sweep_curvature, args.k0, "k0")


def cmd_sweep_blocks(args) -> int:
    return _sweep(args, sweep_blocks, args.n, "n_blocks")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=PRESETS, default="desk")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shmamba", description="Hyperbolic alignment + selective-scan AVQA toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--eval-fraction", type=float)
    _config_flags(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    _train_flags(p)
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split")
    p.add_argument("--json", help="also write the result here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="end-to-end gradient check at the smallest config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords", type=int, help="check this many random coordinates per tensor (default: all)")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench-scan", help="time the chunked scan across sequence lengths")
    p.add_argument("--lengths", type=int, nargs="+", default=[1024, 4096])
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--inner", type=int, default=32)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--chunk", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_bench_scan)

    p = sub.add_parser("sweep-curvature", help="one training run per initial curvature")
    _train_flags(p)
    p.add_argument("--k0", type=float, nargs="+", default=[-0.05, -0.1, -0.5, -1.0, -2.0])
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(fn=cmd_sweep_curvature)

    p = sub.add_parser("sweep-blocks", help="one training run per Mamba block count")
    _train_flags(p)
    p.add_argument("--n", type=int, nargs="+", default=[0, 1, 2, 4])
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(fn=cmd_sweep_blocks)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (NumericalAbort, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError, ShapeError, ManifestError, TensorFileError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
