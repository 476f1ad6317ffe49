import dataclasses
import json

import numpy as np
import pytest

from cdflow import flow, optim, train, util


class TestNamedRng:
    def test_deterministic(self):
        a = util.named_rng(7, "data", 3).standard_normal(5)
        b = util.named_rng(7, "data", 3).standard_normal(5)
        assert np.array_equal(a, b)

    def test_streams_independent(self):
        a = util.named_rng(7, "data", 3).standard_normal(5)
        b = util.named_rng(7, "data", 4).standard_normal(5)
        c = util.named_rng(7, "dequant", 3).standard_normal(5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestMakeDataset:
    @pytest.mark.parametrize("kind", ["checkerboard2d", "moons2d", "circles2d"])
    def test_toys_deterministic_and_shaped(self, kind):
        a = train.make_dataset(kind, seed=3, size=64)
        b = train.make_dataset(kind, seed=3, size=64)
        assert np.array_equal(a.data[:10], b.data[:10])
        assert a.data.shape == (64, 2, 1, 1)
        assert not a.quantized
        assert np.all(np.isfinite(a.data))

    def test_toys_differ_by_seed(self):
        a = train.make_dataset("moons2d", seed=1, size=32)
        b = train.make_dataset("moons2d", seed=2, size=32)
        assert not np.array_equal(a.data, b.data)

    def test_checkerboard_occupies_alternating_cells(self):
        ds = train.make_dataset("checkerboard2d", seed=0, size=4000)
        pts = ds.data.reshape(-1, 2)
        assert np.all(pts >= -2.0) and np.all(pts < 2.0)
        cells = np.floor(pts + 2.0).astype(int)
        assert np.all((cells[:, 0] + cells[:, 1]) % 2 == 0)
        # all 8 permitted cells get mass
        assert len({(i, j) for i, j in cells}) == 8

    def test_moons_two_clusters_near_unit_arcs(self):
        ds = train.make_dataset("moons2d", seed=0, size=2000)
        pts = ds.data.reshape(-1, 2)
        assert pts[:, 0].min() < -0.7 and pts[:, 0].max() > 1.7
        assert np.abs(pts).max() < 3.0

    def test_circles_radii(self):
        ds = train.make_dataset("circles2d", seed=0, size=2000)
        r = np.linalg.norm(ds.data.reshape(-1, 2), axis=1)
        near_outer = np.abs(r - 1.0) < 0.25
        near_inner = np.abs(r - 0.5) < 0.25
        assert np.all(near_outer | near_inner)
        assert near_outer.sum() > 600 and near_inner.sum() > 600

    def test_texture_is_8bit_and_spans_range(self):
        ds = train.make_dataset("periodic_texture", seed=5, size=12, image_size=16)
        assert ds.data.dtype == np.uint8
        assert ds.data.shape == (12, 1, 16, 16)
        assert ds.quantized
        # min-max scaling pins the extremes of each image
        assert np.all(ds.data.reshape(12, -1).min(axis=1) == 0)
        assert np.all(ds.data.reshape(12, -1).max(axis=1) == 255)

    def test_texture_wraps_exactly_before_quantization(self):
        params = train.texture_wave_params(seed=5, index=2)
        xs = np.arange(16.0)
        top = train.texture_field(params, np.array([0.0]), xs, period=16)
        wrap = train.texture_field(params, np.array([16.0]), xs, period=16)
        np.testing.assert_allclose(top, wrap, atol=1e-12)
        left = train.texture_field(params, xs, np.array([0.0]), period=16)
        right = train.texture_field(params, xs, np.array([16.0]), period=16)
        np.testing.assert_allclose(left, right, atol=1e-12)

    def test_texture_deterministic(self):
        a = train.make_dataset("periodic_texture", seed=9, size=4, image_size=8)
        b = train.make_dataset("periodic_texture", seed=9, size=4, image_size=8)
        assert np.array_equal(a.data, b.data)

    def test_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 256, size=(7, 3, 4, 5), dtype=np.uint8)
        path = tmp_path / "imgs.u8"
        train.save_file_dataset(path, arr)
        sidecar = json.loads((tmp_path / "imgs.u8.json").read_text())
        assert sidecar == {"count": 7, "C": 3, "H": 4, "W": 5}
        ds = train.make_dataset("file", seed=0, size=0, path=path)
        assert np.array_equal(ds.data, arr)
        assert ds.quantized

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown dataset"):
            train.make_dataset("mnist", seed=0, size=8)

    def test_dequantized_batch_in_unit_interval(self):
        ds = train.make_dataset("periodic_texture", seed=1, size=6, image_size=8)
        x = ds.batch(np.arange(6), util.named_rng(0, "dequant", 0))
        assert x.dtype == np.float64
        assert np.all(x >= 0.0) and np.all(x < 1.0)

    def test_quantized_batch_requires_rng(self):
        ds = train.make_dataset("periodic_texture", seed=1, size=2, image_size=8)
        with pytest.raises(ValueError, match="rng"):
            ds.batch(np.arange(2))


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = np.array([1.0, -2.0])
        adam = optim.Adam(lr=0.1)
        adam.step([("p", p, np.zeros(2), 1.0)])
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_scalar_quadratic_converges(self):
        p = np.array([0.0])
        adam = optim.Adam(lr=0.05)
        for _ in range(2000):
            adam.step([("p", p, 2.0 * (p - 3.0), 1.0)])
        assert abs(p[0] - 3.0) < 1e-3

    def test_lr_scale_halves_first_update(self):
        pa = np.array([1.0])
        pb = np.array([1.0])
        g = np.array([0.7])
        adam = optim.Adam(lr=0.1)
        adam.step([("a", pa, g, 1.0), ("b", pb, g, 0.5)])
        da, db = 1.0 - pa[0], 1.0 - pb[0]
        assert db == pytest.approx(0.5 * da, rel=1e-12)

    def test_channel_lr_rule(self):
        assert train.channel_lr_scale(8) == 1.0
        assert train.channel_lr_scale(16) == 1.0
        assert train.channel_lr_scale(32) == 0.5
        assert train.channel_lr_scale(64) == 0.25


def toy_config(**kw):
    base = dict(dataset="checkerboard2d", dataset_size=4096, L=1, K=3, m=2,
                hidden=24, lr=5e-3, lr_schedule="constant", batch=128,
                steps=10, seed=0, checkpoint_every=1000)
    base.update(kw)
    return train.TrainConfig(**base)


class TestLrSchedule:
    def test_constant(self):
        cfg = toy_config(lr=0.01, lr_schedule="constant", steps=100)
        assert train.lr_at(cfg, 0) == 0.01
        assert train.lr_at(cfg, 99) == 0.01

    def test_cosine_decays(self):
        cfg = toy_config(lr=0.01, lr_schedule="cosine", steps=100)
        assert train.lr_at(cfg, 0) == pytest.approx(0.01)
        assert train.lr_at(cfg, 50) == pytest.approx(0.005, rel=1e-6)
        assert 0.0 < train.lr_at(cfg, 99) < 0.001

    def test_unknown_schedule_rejected(self):
        cfg = toy_config(lr_schedule="linear")
        with pytest.raises(ValueError, match="schedule"):
            train.lr_at(cfg, 0)


class TestTrainLoop:
    def test_smoke_checkerboard_improves_heldout_nll(self):
        cfg = toy_config(steps=200, K=6, hidden=64, batch=512, lr=1e-2,
                         dataset_size=50000)
        ds = train.make_dataset(cfg.dataset, seed=cfg.seed, size=cfg.dataset_size)
        held = train.make_dataset(cfg.dataset, seed=cfg.seed + 1, size=2048)
        model = train.model_from_config(cfg, ds)
        # adopt actnorm statistics, then score the untrained model
        model.forward(ds.batch(np.arange(cfg.batch)))
        before = train.evaluate(model, held)
        model, rows = train.train(model, ds, cfg)
        after = train.evaluate(model, held)
        assert after < 0.85 * before
        assert len(rows) == 200

    def test_zero_lr_freezes_metrics_and_eval(self):
        cfg = toy_config(steps=3, lr=0.0)
        ds = train.make_dataset(cfg.dataset, seed=0, size=1024)
        model = train.model_from_config(cfg, ds)
        model.forward(ds.batch(np.arange(cfg.batch)))
        before = train.evaluate(model, ds)
        _, rows = train.train(model, ds, cfg)
        assert train.evaluate(model, ds) == before
        assert rows[0]["max_sigma"] == rows[-1]["max_sigma"]

    def test_single_tiny_step_decreases_batch_loss(self):
        cfg = toy_config(steps=1, lr=1e-4, spectral_norm=False)
        ds = train.make_dataset(cfg.dataset, seed=0, size=1024)
        model = train.model_from_config(cfg, ds)
        idx = util.named_rng(cfg.seed, "data", 0).integers(0, len(ds), cfg.batch)
        x = ds.batch(idx)
        model.forward(x)  # init actnorm on the same batch the step will use
        before = model.nll(x)
        train.train(model, ds, cfg)
        assert model.nll(x) < before

    def test_metrics_schema(self):
        cfg = toy_config(steps=4)
        ds = train.make_dataset(cfg.dataset, seed=0, size=512)
        model = train.model_from_config(cfg, ds)
        _, rows = train.train(model, ds, cfg)
        assert [r["step"] for r in rows] == [1, 2, 3, 4]
        for key in ("step", "nll", "bpd", "grad_norm", "max_sigma", "wall_ms"):
            assert key in rows[0]
        assert rows[0]["grad_norm"] > 0.0

    def test_metrics_csv_written(self, tmp_path):
        cfg = toy_config(steps=5)
        ds = train.make_dataset(cfg.dataset, seed=0, size=512)
        model = train.model_from_config(cfg, ds)
        train.train(model, ds, cfg, out_dir=tmp_path)
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "step,nll,bpd,grad_norm,max_sigma,wall_ms"
        assert len(lines) == 6

    def test_spectral_rescale_enforced_every_step(self):
        cfg = toy_config(steps=5, lr=0.5, spectral_norm=True)
        ds = train.make_dataset(cfg.dataset, seed=0, size=512)
        model = train.model_from_config(cfg, ds)
        _, rows = train.train(model, ds, cfg)
        for row in rows:
            assert row["max_sigma"] <= 1.05 + 1e-12
        for mix in model.mixing_layers():
            assert mix.sigma_max() <= 1.05 + 1e-12

    def test_spectral_rescale_off_lets_factors_grow(self):
        cfg = toy_config(steps=40, lr=0.3, spectral_norm=False)
        ds = train.make_dataset(cfg.dataset, seed=0, size=512)
        model = train.model_from_config(cfg, ds)
        _, rows = train.train(model, ds, cfg)
        assert max(r["max_sigma"] for r in rows) > 1.05

    def test_nonfinite_loss_aborts_with_layer_report(self):
        cfg = toy_config(steps=2)
        ds = train.make_dataset(cfg.dataset, seed=0, size=512)
        model = train.model_from_config(cfg, ds)
        model.forward(ds.batch(np.arange(cfg.batch)))
        model.mixing_layers()[0].chain.diagonals[0].d[:] = 1e300
        with pytest.raises(train.NumericalError) as err:
            train.train(model, ds, cfg)
        assert err.value.step == 0
        assert any("mix" in name for name, _ in err.value.layer_logdets)

    def test_deterministic_given_config(self):
        cfg = toy_config(steps=6)
        rows = []
        for _ in range(2):
            ds = train.make_dataset(cfg.dataset, seed=cfg.seed, size=512)
            model = train.model_from_config(cfg, ds)
            _, r = train.train(model, ds, cfg)
            rows.append(r)
        for a, b in zip(*rows):
            assert a["nll"] == b["nll"]
            assert a["grad_norm"] == b["grad_norm"]


class TestResume:
    @pytest.mark.parametrize("dataset,extra", [
        ("checkerboard2d", {}),
        ("periodic_texture", {"image_size": 8, "L": 1, "K": 1, "hidden": 8, "batch": 8}),
    ])
    def test_resume_reproduces_bit_identically(self, tmp_path, dataset, extra):
        kw = dict(dataset=dataset, steps=6, checkpoint_every=3, dataset_size=64)
        kw.update(extra)
        cfg = toy_config(**kw)

        ds = train.make_dataset(cfg.dataset, seed=cfg.seed, size=cfg.dataset_size,
                                image_size=getattr(cfg, "image_size", 16))
        full_dir = tmp_path / "full"
        model = train.model_from_config(cfg, ds)
        _, full_rows = train.train(model, ds, cfg, out_dir=full_dir)

        part_dir = tmp_path / "part"
        cfg_half = dataclasses.replace(cfg, steps=3)
        model2 = train.model_from_config(cfg_half, ds)
        train.train(model2, ds, cfg_half, out_dir=part_dir)

        ckpt = train.latest_checkpoint(part_dir)
        assert ckpt is not None and ckpt.name == "ckpt-0000003"
        model3, adam, manifest = train.load_train_checkpoint(ckpt)
        assert manifest["step"] == 3
        _, tail_rows = train.train(model3, ds, cfg, out_dir=part_dir, adam=adam,
                                   start_step=3)

        assert len(tail_rows) == 3
        for a, b in zip(full_rows[3:], tail_rows):
            for key in ("step", "nll", "bpd", "grad_norm", "max_sigma"):
                assert a[key] == b[key], key

        # the appended CSV matches the uninterrupted one except wall_ms
        def strip(path):
            rows = (path / "metrics.csv").read_text().strip().splitlines()
            return [",".join(line.split(",")[:5]) for line in rows]

        assert strip(full_dir) == strip(part_dir)


class TestEvaluate:
    def test_identity_model_gaussian_entropy(self):
        model = flow.FlowModel([], (2, 1, 1))
        rng = np.random.default_rng(0)
        data = rng.standard_normal((100000, 2, 1, 1))
        ds = train.Dataset("memory", data, quantized=False)
        got = train.evaluate(model, ds)
        want = 0.5 * 2 * (1.0 + np.log(2 * np.pi))
        assert got == pytest.approx(want, rel=5e-3)

    def test_partition_invariant(self):
        cfg = toy_config()
        ds = train.make_dataset("moons2d", seed=0, size=3000)
        model = train.model_from_config(cfg, ds)
        model.forward(ds.batch(np.arange(256)))
        a = train.evaluate(model, ds, batch=64)
        b = train.evaluate(model, ds, batch=1024)
        assert abs(a - b) < 1e-10

    def test_fixed_eval_seed_freezes_dequantization(self):
        ds = train.make_dataset("periodic_texture", seed=2, size=32, image_size=8)
        cfg = toy_config(dataset="periodic_texture", image_size=8, K=1, hidden=8)
        model = train.model_from_config(cfg, ds)
        model.forward(ds.batch(np.arange(8), util.named_rng(0, "dequant", 0)))
        a = train.evaluate(model, ds, eval_seed=7)
        b = train.evaluate(model, ds, eval_seed=7)
        c = train.evaluate(model, ds, eval_seed=8)
        assert a == b
        assert a != c

    def test_bpd_metric_offsets_quantized_data(self):
        model = flow.FlowModel([], (1, 2, 2))
        rng = np.random.default_rng(0)
        data = rng.integers(0, 256, size=(2000, 1, 2, 2), dtype=np.uint8)
        ds = train.Dataset("memory", data, quantized=True)
        nll = train.evaluate(model, ds, metric="nll", eval_seed=0)
        bpd = train.evaluate(model, ds, metric="bpd", eval_seed=0)
        assert bpd == pytest.approx(nll / (4 * np.log(2.0)) + 8.0, rel=1e-12)

    def test_sharded_evaluation_matches_single_thread(self):
        ds = train.make_dataset("circles2d", seed=0, size=2000)
        cfg = toy_config()
        model = train.model_from_config(cfg, ds)
        model.forward(ds.batch(np.arange(256)))
        a = train.evaluate(model, ds, batch=128, threads=1)
        b = train.evaluate(model, ds, batch=128, threads=4)
        assert a == b

    def test_unknown_metric_rejected(self):
        ds = train.make_dataset("moons2d", seed=0, size=16)
        model = flow.FlowModel([], (2, 1, 1))
        with pytest.raises(ValueError, match="metric"):
            train.evaluate(model, ds, metric="elbo")


class TestTrainConfig:
    def test_json_roundtrip(self):
        cfg = toy_config(dataset="periodic_texture", steps=777)
        d = json.loads(json.dumps(cfg.to_dict()))
        assert train.TrainConfig.from_dict(d) == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config"):
            train.TrainConfig.from_dict({"dataset": "moons2d", "optimizer": "sgd"})

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            toy_config(m=0)
        with pytest.raises(ValueError):
            toy_config(batch=0)
