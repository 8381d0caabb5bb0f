import json
import struct

import numpy as np
import pytest

from shmamba.data import (
    MANIFEST_NAME,
    BadMagicError,
    FeatureBundle,
    ManifestError,
    MissingFileError,
    ShapeMismatchError,
    SyntheticSpec,
    TruncatedPayloadError,
    VersionMismatchError,
    build_world,
    collate,
    generate_synthetic_dataset,
    load_bundles,
    load_dataset_manifest,
    read_manifest,
    read_tensor_file,
    write_tensor_file,
)
from shmamba.tensor import Tensor


def small_spec(**kw):
    base = dict(n_samples=12, T=4, d_audio=6, d_visual=5, d_question=3, vocab_size=6,
                n_parent_classes=2, n_child_classes=4, seed=7)
    return SyntheticSpec(**{**base, **kw})


class TestTensorFile:
    def test_round_trip(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(3, 4, 5))
        write_tensor_file(tmp_path / "x.sht", Tensor(x))
        y = read_tensor_file(tmp_path / "x.sht")
        assert y.dtype == np.float64 and y.shape == (3, 4, 5)
        np.testing.assert_array_equal(y, x.astype(np.float32).astype(np.float64))

    def test_exact_bytes(self, tmp_path):
        write_tensor_file(tmp_path / "x.sht", np.array([[1.0, -2.0, 0.5]]))
        raw = (tmp_path / "x.sht").read_bytes()
        expected = b"SHT1" + struct.pack("<II", 1, 2) + struct.pack("<QQ", 1, 3) + struct.pack("<3f", 1.0, -2.0, 0.5)
        assert raw == expected

    def test_scalar(self, tmp_path):
        write_tensor_file(tmp_path / "s.sht", np.float64(2.5))
        assert read_tensor_file(tmp_path / "s.sht").shape == ()
        assert read_tensor_file(tmp_path / "s.sht")[()] == 2.5

    def test_bad_magic(self, tmp_path):
        write_tensor_file(tmp_path / "x.sht", np.ones(3))
        raw = bytearray((tmp_path / "x.sht").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "x.sht").write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            read_tensor_file(tmp_path / "x.sht")

    def test_version_mismatch(self, tmp_path):
        write_tensor_file(tmp_path / "x.sht", np.ones(3))
        raw = bytearray((tmp_path / "x.sht").read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        (tmp_path / "x.sht").write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            read_tensor_file(tmp_path / "x.sht")

    @pytest.mark.parametrize("cut", [1, 4])
    def test_truncated_payload(self, tmp_path, cut):
        write_tensor_file(tmp_path / "x.sht", np.ones((2, 3)))
        raw = (tmp_path / "x.sht").read_bytes()
        (tmp_path / "x.sht").write_bytes(raw[:-cut])
        with pytest.raises(TruncatedPayloadError):
            read_tensor_file(tmp_path / "x.sht")

    def test_dims_disagree_with_payload(self, tmp_path):
        write_tensor_file(tmp_path / "x.sht", np.ones((2, 3)))
        raw = bytearray((tmp_path / "x.sht").read_bytes())
        raw[12:20] = struct.pack("<Q", 5)
        (tmp_path / "x.sht").write_bytes(bytes(raw))
        with pytest.raises(TruncatedPayloadError):
            read_tensor_file(tmp_path / "x.sht")

    def test_huge_declared_dims_rejected_before_allocation(self, tmp_path):
        p = tmp_path / "x.sht"
        p.write_bytes(b"SHT1" + struct.pack("<II", 1, 1) + struct.pack("<Q", 2**40))
        with pytest.raises(TruncatedPayloadError):
            read_tensor_file(p)

    def test_errors_are_distinct(self):
        kinds = {BadMagicError, VersionMismatchError, TruncatedPayloadError}
        for a in kinds:
            for b in kinds - {a}:
                assert not issubclass(a, b)

    def test_non_finite_refused(self, tmp_path):
        with pytest.raises(ValueError):
            write_tensor_file(tmp_path / "x.sht", np.array([1.0, np.nan]))
        with pytest.raises(ValueError):
            write_tensor_file(tmp_path / "x.sht", np.array([1e300]))


class TestSpec:
    @pytest.mark.parametrize(
        "kw", [dict(n_parent_classes=5, n_child_classes=4), dict(vocab_size=1), dict(noise_std=-0.1), dict(eval_fraction=1.0)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small_spec(**kw)


class TestGeneration:
    def test_manifest_contents(self, tmp_path):
        path = generate_synthetic_dataset(SyntheticSpec(n_samples=64, vocab_size=6, T=4, seed=3), tmp_path)
        doc = read_manifest(path)
        assert len(doc["samples"]) == 64
        assert all(0 <= s["label"] < 6 for s in doc["samples"])
        assert doc["vocab"] == [f"answer_{j:02d}" for j in range(6)]
        assert doc["spec"]["seed"] == 3 and doc["seed"] == 3
        assert (tmp_path / MANIFEST_NAME).exists()
        assert all((tmp_path / s["audio"]).parent.name == "samples" for s in doc["samples"])

    def test_byte_identical_reruns(self, tmp_path):
        spec = small_spec(seed=7)
        generate_synthetic_dataset(spec, tmp_path / "a")
        generate_synthetic_dataset(spec, tmp_path / "b")
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b and len(files_a) == 1 + 3 * spec.n_samples
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        generate_synthetic_dataset(small_spec(seed=1), tmp_path / "a")
        generate_synthetic_dataset(small_spec(seed=2), tmp_path / "b")
        assert (tmp_path / "a/samples/00000_audio.sht").read_bytes() != (tmp_path / "b/samples/00000_audio.sht").read_bytes()

    def test_zero_noise_same_child_identical(self, tmp_path):
        path = generate_synthetic_dataset(small_spec(n_samples=40, noise_std=0.0), tmp_path)
        doc = read_manifest(path)
        bundles = load_bundles(path)
        by_child = {}
        for s, b in zip(doc["samples"], bundles):
            by_child.setdefault(s["child"], []).append(b)
        pairs = [v for v in by_child.values() if len(v) >= 2]
        assert pairs
        for group in pairs:
            np.testing.assert_array_equal(group[0].f_a, group[1].f_a)
            np.testing.assert_array_equal(group[0].f_v, group[1].f_v)

    def test_label_is_function_of_child_and_query(self, tmp_path):
        path = generate_synthetic_dataset(small_spec(n_samples=80), tmp_path)
        table = {}
        for s in read_manifest(path)["samples"]:
            key = (s["child"], s["query_type"])
            assert table.setdefault(key, s["label"]) == s["label"]

    def test_parent_queries_share_answers_within_parent(self, tmp_path):
        path = generate_synthetic_dataset(small_spec(n_samples=80), tmp_path)
        seen = {}
        for s in read_manifest(path)["samples"]:
            if s["query_type"] == 0:
                assert seen.setdefault(s["parent"], s["label"]) == s["label"]

    def test_hierarchy_signal(self):
        world = build_world(SyntheticSpec(seed=0), np.random.default_rng(0))
        assert world.hierarchy_gap > 0
        assert np.array_equal(world.parent_of, np.arange(8) % 4)

    def test_audio_visual_projections_distinct(self):
        world = build_world(SyntheticSpec(d_audio=8, d_visual=8), np.random.default_rng(0))
        assert not np.allclose(world.audio_proj, world.visual_proj)

    def test_eval_split(self, tmp_path):
        path = generate_synthetic_dataset(small_spec(n_samples=20, eval_fraction=0.25), tmp_path)
        assert len(load_bundles(path, "eval")) == 5
        assert len(load_bundles(path, "train")) == 15
        assert len(load_bundles(path)) == 20

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_nearest_centroid_separability(self, tmp_path, seed):
        spec = SyntheticSpec(n_samples=400, noise_std=0.05, seed=seed)
        path = generate_synthetic_dataset(spec, tmp_path)
        doc = read_manifest(path)
        bundles = load_bundles(path)
        feats = np.stack([np.concatenate([b.f_a.mean(0), b.f_v.mean(0)]) for b in bundles])
        child = np.array([s["child"] for s in doc["samples"]])
        train = np.arange(len(child)) % 2 == 0
        classes = np.unique(child[train])
        centroids = np.stack([feats[train & (child == c)].mean(0) for c in classes])
        dist = ((feats[~train, None, :] - centroids[None]) ** 2).sum(-1)
        acc = np.mean(classes[dist.argmin(1)] == child[~train])
        assert acc >= 0.95


class TestManifest:
    def test_loads_in_order(self, tmp_path):
        path = generate_synthetic_dataset(small_spec(), tmp_path)
        bundles = list(load_dataset_manifest(path))
        assert [b.index for b in bundles] == list(range(12))
        assert bundles[0].f_a.shape == (4, 6) and bundles[0].f_v.shape == (4, 5) and bundles[0].f_q.shape == (3,)
        # directory or file path both work
        assert len(load_bundles(tmp_path)) == 12

    def test_missing_file_names_sample(self, tmp_path):
        path = generate_synthetic_dataset(small_spec(), tmp_path)
        (tmp_path / "samples/00005_visual.sht").unlink()
        with pytest.raises(MissingFileError, match="sample 5"):
            load_bundles(path)

    def test_corrupt_dims_names_sample(self, tmp_path):
        path = generate_synthetic_dataset(small_spec(), tmp_path)
        write_tensor_file(tmp_path / "samples/00003_audio.sht", np.ones((4, 7)))
        with pytest.raises(ShapeMismatchError, match="sample 3"):
            load_bundles(path)

    def test_corrupt_header_names_sample(self, tmp_path):
        path = generate_synthetic_dataset(small_spec(), tmp_path)
        p = tmp_path / "samples/00002_question.sht"
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(ShapeMismatchError, match="sample 2"):
            load_bundles(path)

    def test_not_a_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(ManifestError):
            read_manifest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            read_manifest(tmp_path / "nope.json")


class TestBundles:
    def test_collate(self):
        rng = np.random.default_rng(0)
        bs = [FeatureBundle(rng.normal(size=(3, 2)), rng.normal(size=(3, 4)), rng.normal(size=5), i, i % 2, i) for i in range(4)]
        b = collate(bs)
        assert b.audio.shape == (4, 3, 2) and b.visual.shape == (4, 3, 4) and b.question.shape == (4, 5)
        assert b.labels.tolist() == [0, 1, 2, 3] and b.query_types.tolist() == [0, 1, 0, 1] and len(b) == 4

    def test_segment_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            FeatureBundle(np.ones((3, 2)), np.ones((4, 2)), np.ones(2), 0)
