"""Synthetic AVQA-shaped datasets, the SHT1 tensor file format, and manifests.

Tensor file layout (all little-endian)::

    magic   4 bytes   b"SHT1"
    version u32       1
    rank    u32
    dims    rank x u64
    payload product(dims) x float32, row-major

A dataset directory holds ``manifest.json`` at its root and the tensor
files under ``samples/``; see README for the manifest schema.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"SHT1"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "shmamba-dataset"
MANIFEST_VERSION = 1
QUERY_KINDS = ("parent", "child")

_HEADER = struct.Struct("<4sII")


class TensorFileError(ValueError):
    pass


class BadMagicError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class ManifestError(ValueError):
    pass


class MissingFileError(ManifestError, FileNotFoundError):
    pass


class ShapeMismatchError(ManifestError):
    pass


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------


def write_tensor_file(path: str | os.PathLike, x) -> None:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"refusing to write non-finite tensor to {path}")
    if arr.size and np.abs(arr).max() > np.finfo(np.float32).max:
        raise ValueError(f"tensor overflows float32: {path}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(payload.tobytes())


def read_tensor_file(path: str | os.PathLike) -> np.ndarray:
    """Read a tensor file into a float64 array, validating the header first."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise TruncatedPayloadError(f"{path}: header is truncated")
        magic, version, rank = _HEADER.unpack(head)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
        dims_raw = fh.read(8 * rank)
        if len(dims_raw) < 8 * rank:
            raise TruncatedPayloadError(f"{path}: dims are truncated")
        dims = struct.unpack(f"<{rank}Q", dims_raw)
        expected = 4 * int(np.prod(dims, dtype=np.uint64))
        remaining = os.fstat(fh.fileno()).st_size - fh.tell()
        if remaining != expected:
            raise TruncatedPayloadError(
                f"{path}: payload has {remaining} bytes, dims {tuple(dims)} need {expected}"
            )
        payload = fh.read(expected)
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------


@dataclass
class FeatureBundle:
    """One question about one clip: audio (T, D_a), visual (T, D_v), question (D_q)."""

    f_a: np.ndarray
    f_v: np.ndarray
    f_q: np.ndarray
    label: int
    query_type: int = 0
    index: int = 0

    def __post_init__(self):
        if self.f_a.ndim != 2 or self.f_v.ndim != 2 or self.f_q.ndim != 1:
            raise ShapeMismatchError(f"sample {self.index}: bad feature ranks")
        if self.f_a.shape[0] < 1 or self.f_a.shape[0] != self.f_v.shape[0]:
            raise ShapeMismatchError(f"sample {self.index}: audio/visual segment counts differ")


@dataclass
class Batch:
    audio: np.ndarray  # (B, T, D_a)
    visual: np.ndarray  # (B, T, D_v)
    question: np.ndarray  # (B, D_q)
    labels: np.ndarray  # (B,)
    query_types: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.labels)


def collate(bundles: Sequence[FeatureBundle]) -> Batch:
    return Batch(
        audio=np.stack([b.f_a for b in bundles]),
        visual=np.stack([b.f_v for b in bundles]),
        question=np.stack([b.f_q for b in bundles]),
        labels=np.array([b.label for b in bundles], dtype=np.int64),
        query_types=np.array([b.query_type for b in bundles], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_samples: int = 64
    T: int = 8
    d_audio: int = 128
    d_visual: int = 128
    d_question: int = 128
    vocab_size: int = 42
    n_parent_classes: int = 4
    n_child_classes: int = 8
    noise_std: float = 0.05
    seed: int = 0
    n_query_types: int = 2
    eval_fraction: float = 0.0
    latent_dim: int = 16
    child_spread: float = 0.6
    temporal_amplitude: float = 0.5

    def __post_init__(self):
        if self.n_child_classes < self.n_parent_classes:
            raise ValueError("n_child_classes must be >= n_parent_classes")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if min(self.n_samples, self.T, self.d_audio, self.d_visual, self.d_question, self.latent_dim) < 1:
            raise ValueError("sizes must be >= 1")
        if self.n_parent_classes < 1 or self.n_query_types < 1:
            raise ValueError("need at least one parent class and one query type")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must be in [0, 1)")


@dataclass
class SyntheticWorld:
    """Everything sampled once per seed: the class hierarchy and projections."""

    parent_of: np.ndarray  # (n_child,)
    prototypes: np.ndarray  # (n_child, T, latent)
    audio_proj: np.ndarray  # (latent, D_a)
    visual_proj: np.ndarray  # (latent, D_v)
    question_protos: np.ndarray  # (n_query, D_q)
    answer_table: np.ndarray  # (n_query, n_child) -> label
    hierarchy_gap: float = field(default=0.0)


def _mean_cosine(vecs: np.ndarray, mask: np.ndarray) -> float:
    unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    sims = unit @ unit.T
    return float(sims[mask].mean()) if mask.any() else float("nan")


def build_world(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticWorld:
    lat, T = spec.latent_dim, spec.T
    parent_of = np.arange(spec.n_child_classes) % spec.n_parent_classes
    parents = rng.normal(size=(spec.n_parent_classes, lat))
    centers = parents[parent_of] + spec.child_spread * rng.normal(size=(spec.n_child_classes, lat))
    # each child also carries a motif swept through time with its own frequency and phase
    motifs = rng.normal(size=(spec.n_child_classes, lat))
    freq = rng.uniform(0.5, 2.0, size=spec.n_child_classes)
    phase = rng.uniform(0.0, 2 * np.pi, size=spec.n_child_classes)
    t = np.arange(T) / max(T, 1)
    profile = np.sin(2 * np.pi * freq[:, None] * t[None, :] + phase[:, None])  # (n_child, T)
    profile -= profile.mean(axis=1, keepdims=True)  # time-averaging removes the motif
    prototypes = centers[:, None, :] + spec.temporal_amplitude * profile[..., None] * motifs[:, None, :]

    same = parent_of[:, None] == parent_of[None, :]
    off_diag = ~np.eye(spec.n_child_classes, dtype=bool)
    within = _mean_cosine(centers, same & off_diag)
    across = _mean_cosine(centers, ~same)
    gap = within - across if not np.isnan(within) and not np.isnan(across) else float("inf")
    if not gap > 0:
        raise AssertionError(f"hierarchy signal missing: within {within:.3f} <= across {across:.3f}")

    audio_proj = rng.normal(size=(lat, spec.d_audio)) / np.sqrt(lat)
    visual_proj = rng.normal(size=(lat, spec.d_visual)) / np.sqrt(lat)
    question_protos = rng.normal(size=(spec.n_query_types, spec.d_question))
    table = np.empty((spec.n_query_types, spec.n_child_classes), dtype=np.int64)
    for q in range(spec.n_query_types):
        if QUERY_KINDS[q % 2] == "parent":
            per_parent = rng.integers(0, spec.vocab_size, size=spec.n_parent_classes)
            table[q] = per_parent[parent_of]
        else:
            table[q] = rng.integers(0, spec.vocab_size, size=spec.n_child_classes)
    return SyntheticWorld(parent_of, prototypes, audio_proj, visual_proj, question_protos, table, gap)


def _sample_path(i: int, kind: str) -> str:
    return f"samples/{i:05d}_{kind}.sht"


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir: str | os.PathLike) -> Path:
    """Write a dataset for ``spec`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    world = build_world(spec, rng)

    n_eval = int(round(spec.eval_fraction * spec.n_samples))
    splits = np.array(["train"] * (spec.n_samples - n_eval) + ["eval"] * n_eval)
    rng.shuffle(splits)

    samples = []
    for i in range(spec.n_samples):
        child = int(rng.integers(spec.n_child_classes))
        qtype = int(rng.integers(spec.n_query_types))
        proto = world.prototypes[child]
        f_a = proto @ world.audio_proj + spec.noise_std * rng.normal(size=(spec.T, spec.d_audio))
        f_v = proto @ world.visual_proj + spec.noise_std * rng.normal(size=(spec.T, spec.d_visual))
        f_q = world.question_protos[qtype] + spec.noise_std * rng.normal(size=spec.d_question)
        entry = {
            "index": i,
            "audio": _sample_path(i, "audio"),
            "visual": _sample_path(i, "visual"),
            "question": _sample_path(i, "question"),
            "label": int(world.answer_table[qtype, child]),
            "query_type": qtype,
            "child": child,
            "parent": int(world.parent_of[child]),
            "split": str(splits[i]),
        }
        for key, arr in (("audio", f_a), ("visual", f_v), ("question", f_q)):
            write_tensor_file(out / entry[key], arr)
        samples.append(entry)

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": spec.seed,
        "spec": dataclasses.asdict(spec),
        "shapes": {
            "audio": [spec.T, spec.d_audio],
            "visual": [spec.T, spec.d_visual],
            "question": [spec.d_question],
        },
        "vocab": [f"answer_{j:02d}" for j in range(spec.vocab_size)],
        "query_types": [f"{QUERY_KINDS[q % 2]}_{q}" for q in range(spec.n_query_types)],
        "samples": samples,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _resolve(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p / MANIFEST_NAME if p.is_dir() else p


def read_manifest(path: str | os.PathLike) -> dict:
    p = _resolve(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise MissingFileError(f"manifest not found: {p}") from None
    if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{p}: not a {MANIFEST_FORMAT} v{MANIFEST_VERSION} manifest")
    for key in ("shapes", "vocab", "samples"):
        if key not in doc:
            raise ManifestError(f"{p}: missing key {key!r}")
    return doc


def load_dataset_manifest(path: str | os.PathLike, split: str | None = None) -> Iterator[FeatureBundle]:
    """Yield samples in manifest order, shape-checking each tensor.

    ``split`` filters on the per-sample ``split`` field when given.
    """
    p = _resolve(path)
    doc = read_manifest(p)
    root = p.parent
    shapes = {k: tuple(v) for k, v in doc["shapes"].items()}
    n_vocab = len(doc["vocab"])
    for entry in doc["samples"]:
        if split is not None and entry.get("split", "train") != split:
            continue
        idx = entry["index"]
        arrays = {}
        for key in ("audio", "visual", "question"):
            fp = root / entry[key]
            if not fp.exists():
                raise MissingFileError(f"sample {idx}: missing {key} file {fp}")
            try:
                arr = read_tensor_file(fp)
            except TensorFileError as exc:
                raise ShapeMismatchError(f"sample {idx}: {key} file unreadable: {exc}") from exc
            if arr.shape != shapes[key]:
                raise ShapeMismatchError(
                    f"sample {idx}: {key} has shape {arr.shape}, manifest says {shapes[key]}"
                )
            arrays[key] = arr
        label = int(entry["label"])
        if not 0 <= label < n_vocab:
            raise ManifestError(f"sample {idx}: label {label} outside vocab of {n_vocab}")
        yield FeatureBundle(
            arrays["audio"], arrays["visual"], arrays["question"], label, int(entry.get("query_type", 0)), idx
        )


def load_bundles(path: str | os.PathLike, split: str | None = None) -> list[FeatureBundle]:
    return list(load_dataset_manifest(path, split))
