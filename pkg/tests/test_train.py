import json

import numpy as np
import pytest

from shmamba.data import SyntheticSpec, generate_synthetic_dataset
from shmamba.model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from shmamba.tensor import ShapeError, Tensor
from shmamba.train import (
    NumericalAbort,
    OptimState,
    TrainConfig,
    adam_step,
    bench_scan,
    clip_global_norm,
    evaluate,
    iterate_batches,
    sweep_blocks,
    sweep_curvature,
    train_loop,
    train_step,
    write_csv,
)


def tiny_model(**kw):
    base = dict(d_audio_in=6, d_visual_in=6, d_question_in=4, d_hidden=8, n_blocks=1, dropout=0.1,
                vocab_size=5, state=4, conv_width=3, expansion=2)
    return ModelConfig(**{**base, **kw})


def tiny_train(seed=0, **kw):
    return TrainConfig(**{**dict(seed=seed, epochs=2, batch_size=4, lr=1e-2), **kw})


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    spec = SyntheticSpec(n_samples=16, T=4, d_audio=6, d_visual=6, d_question=4, vocab_size=5,
                         n_parent_classes=2, n_child_classes=4, seed=3, eval_fraction=0.25)
    return generate_synthetic_dataset(spec, tmp_path_factory.mktemp("tiny"))


def files_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        st = OptimState(lr=0.1)
        for _ in range(3):
            adam_step(p, {"w": np.zeros(2)}, st)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
        assert st.step == 3

    def test_first_step_moves_by_lr(self):
        p = {"w": Tensor(np.array(1.0))}
        adam_step(p, {"w": np.array(1.0)}, OptimState(lr=1e-4))
        # m_hat = v_hat = 1, so the update is lr / (1 + eps)
        assert p["w"].item() == pytest.approx(1.0 - 1e-4 / (1.0 + 1e-8), abs=1e-15)

    def test_second_step_closed_form(self):
        p = {"w": Tensor(np.array(0.0))}
        st = OptimState(lr=0.01)
        adam_step(p, {"w": np.array(2.0)}, st)
        adam_step(p, {"w": np.array(-1.0)}, st)
        m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0
        v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
        step2 = 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p["w"].item() == pytest.approx(-0.01 / (1 + 1e-8 / 2) - step2, abs=1e-12)

    def test_non_finite_names_parameter(self):
        p = {"a": Tensor(np.zeros(2)), "b": Tensor(np.zeros(2))}
        with pytest.raises(NumericalAbort, match="b"):
            adam_step(p, {"a": np.zeros(2), "b": np.array([0.0, np.inf])}, OptimState())
        np.testing.assert_array_equal(p["a"].data, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)}, OptimState())

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(0)
            p = {"w": Tensor(rng.normal(size=(3, 2)))}
            st = OptimState(lr=1e-3)
            for _ in range(10):
                adam_step(p, {"w": np.sin(p["w"].data) + rng.normal(size=(3, 2))}, st)
            return p["w"].data

        assert np.array_equal(run(), run())


class TestClip:
    def test_scales_down(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm, clipped = clip_global_norm(g, 1.0)
        assert norm == 5.0 and clipped
        np.testing.assert_allclose(np.concatenate([g["a"], g["b"]]), [0.6, 0.8], rtol=0, atol=1e-15)

    def test_small_untouched(self):
        g = {"a": np.array([0.3, 0.4])}
        assert clip_global_norm(g, 1.0) == (0.5, False)
        np.testing.assert_array_equal(g["a"], [0.3, 0.4])


class TestTrainLoop:
    def test_zero_epochs_checkpoint_is_init(self, tiny_manifest, tmp_path):
        cfg = tiny_model()
        res = train_loop(tiny_manifest, cfg, tiny_train(seed=4, epochs=0), tmp_path / "run")
        assert res.records == []
        loaded, _, _ = load_checkpoint(res.checkpoint)
        for (n, t), (_, t0) in zip(loaded.named(), init_params(cfg, 4).named()):
            np.testing.assert_array_equal(t.data, t0.data.astype(np.float32).astype(np.float64), err_msg=n)

    def test_records_and_files(self, tiny_manifest, tmp_path):
        res = train_loop(tiny_manifest, tiny_model(), tiny_train(eval_every=2), tmp_path / "run")
        # 12 training samples, batch 4, 2 epochs
        assert [r.step for r in res.records] == list(range(1, 7))
        lines = (tmp_path / "run/metrics.jsonl").read_text().splitlines()
        assert len(lines) == 6
        first = json.loads(lines[0])
        assert set(first) == {"step", "epoch", "l_align", "l_qa", "total", "batch_acc", "train_acc",
                              "eval_acc", "k", "grad_norm", "clipped"}
        assert first["train_acc"] is None and json.loads(lines[1])["train_acc"] is not None
        assert len((tmp_path / "run/timing.jsonl").read_text().splitlines()) == 6
        for r in res.records:
            assert r.total == r.l_align + r.l_qa
            assert -0.1 < r.k < 0
        assert res.eval_acc is not None

    def test_max_steps(self, tiny_manifest):
        res = train_loop(tiny_manifest, tiny_model(), tiny_train(epochs=10, max_steps=4))
        assert len(res.records) == 4

    def test_same_seed_bitwise(self, tiny_manifest, tmp_path):
        for d in ("a", "b"):
            train_loop(tiny_manifest, tiny_model(), tiny_train(seed=9, eval_every=3), tmp_path / d)
        a, b = files_bytes(tmp_path / "a"), files_bytes(tmp_path / "b")
        a.pop("timing.jsonl"), b.pop("timing.jsonl")
        assert a == b

    def test_different_seed_differs(self, tiny_manifest):
        r1 = train_loop(tiny_manifest, tiny_model(), tiny_train(seed=1))
        r2 = train_loop(tiny_manifest, tiny_model(), tiny_train(seed=2))
        assert [r.total for r in r1.records] != [r.total for r in r2.records]

    def test_non_finite_abort_reports_step(self, tiny_manifest):
        from shmamba.data import collate, load_bundles

        cfg = tiny_model()
        p = init_params(cfg, 0)
        p.head.weight.data = np.full_like(p.head.weight.data, 1e308)
        batch = collate(load_bundles(tiny_manifest)[:4])
        with pytest.raises(NumericalAbort, match="step 17"):
            train_step(batch, cfg, p, OptimState(), np.random.default_rng(0), 1.0, 17)

    def test_config_mismatch(self, tiny_manifest):
        with pytest.raises(ShapeError):
            train_loop(tiny_manifest, tiny_model(d_visual_in=7), tiny_train())
        with pytest.raises(ShapeError):
            train_loop(tiny_manifest, tiny_model(vocab_size=6), tiny_train())

    def test_batches_cover_everything_once(self):
        from shmamba.data import FeatureBundle

        bs = [FeatureBundle(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(1), i, 0, i) for i in range(10)]
        seen = [lab for b in iterate_batches(bs, 4, [9, 8, 7, 6, 5, 4, 3, 2, 1, 0]) for lab in b.labels]
        assert seen == list(range(9, -1, -1))


class TestEvaluate:
    def test_repeatable_and_breakdown(self, tiny_manifest, tmp_path):
        res = train_loop(tiny_manifest, tiny_model(), tiny_train(), tmp_path / "run")
        e1 = evaluate(res.checkpoint, tiny_manifest)
        e2 = evaluate(res.checkpoint, tiny_manifest)
        assert e1 == e2
        assert e1.n == 16 and sum(e1.per_type_n.values()) == 16
        assert set(e1.per_type) <= {"parent_0", "child_1"}
        hits = sum(e1.per_type[k] * e1.per_type_n[k] for k in e1.per_type)
        assert hits == pytest.approx(e1.accuracy * e1.n)
        assert evaluate(res.checkpoint, tiny_manifest, "eval").n == 4

    def test_zero_head_is_chance(self, tmp_path):
        # many classes so the answer table makes labels close to i.i.d. uniform
        spec = SyntheticSpec(n_samples=400, T=2, d_audio=4, d_visual=4, d_question=4, vocab_size=10,
                             n_parent_classes=400, n_child_classes=800, seed=5)
        manifest = generate_synthetic_dataset(spec, tmp_path / "data")
        cfg = tiny_model(d_audio_in=4, d_visual_in=4, d_question_in=4, vocab_size=10)
        p = init_params(cfg, 0)
        p.head.zero_()
        save_checkpoint(tmp_path / "ck", p, cfg, seed=0)
        acc = evaluate(tmp_path / "ck", manifest).accuracy
        sigma = np.sqrt(0.1 * 0.9 / 400)
        assert abs(acc - 0.1) <= 3 * sigma

    def test_shape_mismatch(self, tiny_manifest, tmp_path):
        cfg = tiny_model(d_audio_in=5)
        save_checkpoint(tmp_path / "ck", init_params(cfg, 0), cfg, seed=0)
        with pytest.raises(ShapeError):
            evaluate(tmp_path / "ck", tiny_manifest)


class TestBench:
    def test_rows(self):
        rows = bench_scan([16, 32, 64], trials=5, batch=1, inner=4, state=2, chunk=8)
        assert [r.length for r in rows] == [16, 32, 64]
        assert all(len(r.timings) == 5 for r in rows)
        assert rows[0].ratio is None
        assert rows[1].ratio == pytest.approx(rows[1].median / rows[0].median)
        assert rows[1].median == float(np.median(rows[1].timings))

    def test_single_length(self):
        rows = bench_scan([16], trials=1, batch=1, inner=2, state=2)
        assert len(rows) == 1 and rows[0].ratio is None


class TestSweeps:
    def test_curvature_rows(self, tiny_manifest):
        k0s = [-0.05, -0.1, -0.5, -1.0, -0.1]
        rows = sweep_curvature(k0s, tiny_model(), tiny_train(epochs=1), tiny_manifest)
        assert [r["k0"] for r in rows] == k0s
        assert rows[1] == rows[4]
        for r in rows:
            assert r["k0"] < r["final_k"] < 0

    def test_curvature_rejects_non_negative(self, tiny_manifest):
        with pytest.raises(ValueError):
            sweep_curvature([-0.1, 0.0], tiny_model(), tiny_train(), tiny_manifest)

    def test_blocks_rows(self, tiny_manifest, tmp_path):
        rows = sweep_blocks([0, 1, 2, 4], tiny_model(), tiny_train(epochs=1), tiny_manifest, tmp_path)
        assert [r["n_blocks"] for r in rows] == [0, 1, 2, 4]
        params = [r["params"] for r in rows]
        assert params == sorted(params) and params[0] < params[1]
        assert (tmp_path / "n_00/checkpoint/checkpoint.json").exists()
        again = sweep_blocks([0, 1, 2, 4], tiny_model(), tiny_train(epochs=1), tiny_manifest)
        assert again == rows

    def test_write_csv(self, tmp_path):
        write_csv([{"a": 1, "b": None}, {"a": 2, "b": 0.5}], tmp_path / "x.csv")
        assert (tmp_path / "x.csv").read_text() == "a,b\n1,\n2,0.5\n"
