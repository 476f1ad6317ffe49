import time

import numpy as np
import pytest

from cdflow import baselines, bench, flow, structured


def cofactor_det(M):
    """Exact determinant by first-row cofactor expansion (oracle, O(n!))."""
    n = M.shape[0]
    if n == 1:
        return M[0, 0]
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(M, 0, axis=0), j, axis=1)
        total += ((-1) ** j) * M[0, j] * cofactor_det(minor)
    return total


def rel_err(got, want):
    return np.linalg.norm(np.asarray(got) - np.asarray(want)) / max(1.0, np.linalg.norm(want))


class TestDenseLayer:
    def test_identity(self):
        layer = baselines.DenseLayer(np.eye(4))
        x = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_allclose(layer.forward(x), x)
        assert layer.logdet() == pytest.approx(0.0, abs=1e-12)

    def test_diagonal_logdet(self):
        layer = baselines.DenseLayer(np.diag([2.0, 3.0]))
        assert layer.logdet() == pytest.approx(np.log(6.0), rel=1e-12)

    def test_logdet_matches_cofactor_oracle(self):
        rng = np.random.default_rng(1)
        M = rng.standard_normal((8, 8))
        want = np.log(abs(cofactor_det(M)))
        layer = baselines.DenseLayer(M)
        assert layer.logdet() == pytest.approx(want, rel=1e-10)

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(2)
        M = rng.standard_normal((16, 16)) + 4.0 * np.eye(16)
        layer = baselines.DenseLayer(M)
        x = rng.standard_normal((16, 5))
        np.testing.assert_allclose(layer.inverse(layer.forward(x)), x, atol=1e-9)


class TestLULayer:
    def test_identity(self):
        layer = baselines.LULayer.from_dense(np.eye(5))
        assert layer.logdet() == pytest.approx(0.0, abs=1e-12)

    def test_triangular_logdet_product_rule(self):
        U = np.triu(np.random.default_rng(0).standard_normal((4, 4)))
        np.fill_diagonal(U, [2.0, -1.0, 3.0, 0.5])
        layer = baselines.LULayer.from_dense(np.eye(4) @ U)
        assert layer.logdet() == pytest.approx(np.log(2 * 1 * 3 * 0.5), rel=1e-10)

    def test_matches_dense_logdet_of_product(self):
        rng = np.random.default_rng(3)
        M = rng.standard_normal((12, 12))
        lu = baselines.LULayer.from_dense(M)
        dense = baselines.DenseLayer(M)
        assert lu.logdet() == pytest.approx(dense.logdet(), rel=1e-10)

    def test_forward_needs_pivoting_case(self):
        M = np.array([[0.0, 1.0], [2.0, 3.0]])
        layer = baselines.LULayer.from_dense(M)
        x = np.random.default_rng(0).standard_normal((2, 4))
        np.testing.assert_allclose(layer.forward(x), M @ x, atol=1e-12)

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(4)
        M = rng.standard_normal((20, 20)) + 5.0 * np.eye(20)
        layer = baselines.LULayer.from_dense(M)
        x = rng.standard_normal((20, 3))
        np.testing.assert_allclose(layer.inverse(layer.forward(x)), x, atol=1e-9)


class TestKindsAgree:
    @pytest.mark.parametrize("n", [4, 16, 64])
    def test_forward_outputs_match_across_kinds(self, n):
        rng = np.random.default_rng(n)
        chain = structured.random_chain(rng, n, 2)
        W = structured.chain_materialize(chain)
        x = rng.standard_normal((n, 8))
        ref = baselines.DenseLayer(W).forward(x)
        lu = baselines.LULayer.from_dense(W).forward(x)
        cd = structured.chain_matvec(chain, x)
        assert rel_err(lu, ref) < 1e-10
        assert rel_err(cd, ref) < 1e-10

    def test_logdets_match_across_kinds(self):
        rng = np.random.default_rng(7)
        chain = structured.random_chain(rng, 24, 3)
        W = structured.chain_materialize(chain)
        want = structured.chain_logdet(chain)
        assert baselines.DenseLayer(W).logdet() == pytest.approx(want, rel=1e-9)
        assert baselines.LULayer.from_dense(W).logdet() == pytest.approx(want, rel=1e-9)


class TestTimeOp:
    def test_repeats_one_rejected(self):
        with pytest.raises(ValueError, match="repeats"):
            bench.time_op(lambda: np.zeros(1), repeats=1)

    def test_busy_loop_timed_within_tolerance(self):
        def busy():
            end = time.perf_counter() + 0.002
            while time.perf_counter() < end:
                pass
            return np.ones(1)

        res = bench.time_op(busy, repeats=15, warmup=2)
        assert 1.6 < res.median_ms < 2.4
        assert res.mad_ms < 0.5
        assert res.repeats == 15

    def test_zero_work_thunk_reports_floor(self):
        res = bench.time_op(lambda: 1.0, repeats=10, warmup=1)
        assert res.median_ms >= 0.0
        assert np.isfinite(res.mad_ms)

    def test_warmup_excluded(self):
        calls = {"n": 0}

        def thunk():
            calls["n"] += 1
            if calls["n"] == 1:
                end = time.perf_counter() + 0.05
                while time.perf_counter() < end:
                    pass
            return np.zeros(2)

        res = bench.time_op(thunk, repeats=8, warmup=1)
        assert res.median_ms < 5.0

    def test_checksum_deterministic(self):
        x = np.arange(6.0)
        a = bench.time_op(lambda: x * 2.0, repeats=5, warmup=1)
        b = bench.time_op(lambda: x * 2.0, repeats=5, warmup=1)
        assert a.checksum == b.checksum == pytest.approx(30.0)


class TestSlopeFit:
    @staticmethod
    def synthetic(ns, fn, kind="dense", op="logdet"):
        return [bench.BenchRecord(kind=kind, op=op, n=n, spatial=1, batch=1,
                                  include_reshape=False, median_ms=fn(n),
                                  mad_ms=0.0, repeats=30, checksum=0.0)
                for n in ns]

    def test_quadratic_power_law(self):
        recs = self.synthetic([16, 32, 64, 128, 256, 512], lambda n: n ** 2 * 1e-6)
        assert bench.slope_fit(recs, "dense", "logdet") == pytest.approx(2.0, abs=0.01)

    def test_constant_records(self):
        recs = self.synthetic([16, 32, 64, 128], lambda n: 0.5)
        assert bench.slope_fit(recs, "dense", "logdet") == pytest.approx(0.0, abs=0.01)

    def test_uses_upper_half_of_grid(self):
        # flat below n=64, cubic above: the fit must see only the cubic part
        recs = self.synthetic([8, 16, 32, 64, 128, 256],
                              lambda n: 1.0 if n < 64 else (n / 64.0) ** 3)
        assert bench.slope_fit(recs, "dense", "logdet") == pytest.approx(3.0, abs=0.01)

    def test_missing_records_rejected(self):
        with pytest.raises(ValueError, match="no records"):
            bench.slope_fit([], "dense", "logdet")


class TestBenchSuite:
    def small_config(self, **kw):
        base = dict(ns=(8, 16), batch=8, spatial=1, repeats=30, warmup=2, seed=0)
        base.update(kw)
        return bench.BenchConfig(**base)

    def test_row_count_and_schema(self, tmp_path):
        cfg = self.small_config()
        records = bench.bench_suite(cfg)
        assert len(records) == 2 * 3 * 3  # ns x kinds x ops
        path = tmp_path / "bench.csv"
        bench.write_records(path, records)
        head = path.read_text().splitlines()[0]
        assert head == "kind,op,n,spatial,batch,include_reshape,median_ms,mad_ms,repeats,checksum"
        back = bench.read_records(path)
        assert back == records

    def test_median_positive_and_repeats_recorded(self):
        records = bench.bench_suite(self.small_config())
        for rec in records:
            assert rec.median_ms > 0.0
            assert rec.repeats == 30

    def test_include_reshape_flag_recorded(self):
        recs = bench.bench_suite(self.small_config(include_reshape=True))
        assert all(r.include_reshape for r in recs)

    def test_repeats_below_thirty_rejected(self):
        with pytest.raises(ValueError, match="repeats"):
            bench.BenchRecord(kind="dense", op="logdet", n=8, spatial=1, batch=1,
                              include_reshape=False, median_ms=1.0, mad_ms=0.0,
                              repeats=5, checksum=0.0)

    def test_logdet_rank_stable_at_large_n(self):
        cfg = self.small_config(ns=(256,), batch=16, repeats=30)
        for _ in range(2):
            recs = bench.bench_suite(cfg)
            med = {r.kind: r.median_ms for r in recs if r.op == "logdet"}
            assert med["dense"] > med["cdchain"]
            assert med["dense"] > med["dense_lu"]


class TestMAblation:
    def test_param_counts_exact_and_linear(self):
        rows = bench.m_ablation(n=16, ms=(2, 3, 4, 5), batch=8, spatial=1,
                                repeats=30, warmup=1)
        counts = {r["m"]: r["param_count"] for r in rows}
        assert counts == {m: (2 * m - 1) * 16 for m in (2, 3, 4, 5)}

    def test_all_ops_timed(self):
        rows = bench.m_ablation(n=8, ms=(2, 3), batch=8, spatial=1,
                                repeats=30, warmup=1)
        ops = {(r["m"], r["op"]) for r in rows}
        assert ops == {(m, op) for m in (2, 3) for op in ("forward", "inverse", "logdet")}
        assert all(r["median_ms"] > 0 for r in rows)


class TestMixingLayers:
    @pytest.mark.parametrize("kind", ["full", "lower", "upper", "lu"])
    def test_roundtrip_and_logdet_oracle(self, kind):
        rng = np.random.default_rng(3)
        cfg = flow.FlowConfig(channels=4, height=2, width=2, init_noise=0.2)
        layer = flow.make_mixing(kind, 4, rng, cfg)
        x = rng.standard_normal((3, 4, 2, 2))
        y, logdet, _ = layer.forward(x)
        np.testing.assert_allclose(layer.inverse(y), x, atol=1e-9)
        W = layer.materialize()
        _, want = np.linalg.slogdet(W)
        np.testing.assert_allclose(logdet, np.full(3, 4 * want), atol=1e-9)

    @pytest.mark.parametrize("kind", ["full", "lower", "upper", "lu"])
    def test_backward_matches_fd(self, kind):
        rng = np.random.default_rng(5)
        cfg = flow.FlowConfig(channels=3, height=1, width=2, init_noise=0.15)
        layer = flow.make_mixing(kind, 3, rng, cfg)
        x = rng.standard_normal((2, 3, 1, 2))
        v = rng.standard_normal((2, 3, 1, 2))
        w = rng.standard_normal(2)

        def loss():
            y, ld, _ = layer.forward(x)
            return float(np.sum(v * y) + np.sum(w * ld))

        layer.zero_grads()
        _, _, cache = layer.forward(x)
        gx = layer.backward(cache, v, w)

        h = 1e-6
        for name, p in layer.param_items():
            grad = dict(layer.grad_items())[name]
            flat = p.reshape(-1)
            fd = np.zeros(flat.size)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = loss()
                flat[i] = old - h
                dn = loss()
                flat[i] = old
                fd[i] = (up - dn) / (2 * h)
            assert rel_err(grad.reshape(-1), fd) < 1e-5, (kind, name)
        flat = x.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            dn = loss()
            flat[i] = old
            fd[i] = (up - dn) / (2 * h)
        assert rel_err(gx.reshape(-1), fd) < 1e-5

    def test_effective_param_counts(self):
        rng = np.random.default_rng(0)
        cfg = flow.FlowConfig(channels=6, height=1, width=1, m=2)
        assert flow.make_mixing("full", 6, rng, cfg).effective_param_count == 36
        assert flow.make_mixing("lower", 6, rng, cfg).effective_param_count == 21
        assert flow.make_mixing("upper", 6, rng, cfg).effective_param_count == 21
        assert flow.make_mixing("lu", 6, rng, cfg).effective_param_count == 36
        assert flow.make_mixing("cdchain", 6, rng, cfg).effective_param_count == 18

    @pytest.mark.parametrize("kind", ["full", "lower", "upper", "lu"])
    def test_spectral_rescale_bounds_factors(self, kind):
        rng = np.random.default_rng(9)
        cfg = flow.FlowConfig(channels=4, height=1, width=1, init_noise=1.5)
        layer = flow.make_mixing(kind, 4, rng, cfg)
        layer.spectral_rescale(1.05)
        assert layer.sigma_max() <= 1.05 + 1e-9


class TestLayerTypeStudy:
    def test_all_types_complete_and_emit_rows(self, tmp_path):
        rows = bench.layer_type_study(dataset="moons2d", seeds=(0,), steps=20,
                                      dataset_size=512, batch=64, hidden=16, K=2)
        kinds = {r["layer_type"] for r in rows}
        assert kinds == {"full", "lower", "upper", "lu", "cdchain"}
        for r in rows:
            assert np.isfinite(r["heldout_nll"])
            assert r["mixing_param_count"] > 0
        path = tmp_path / "study.csv"
        bench.write_csv(path, rows)
        assert len(path.read_text().strip().splitlines()) == len(rows) + 1
