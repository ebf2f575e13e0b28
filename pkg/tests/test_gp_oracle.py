import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import adm.gp_oracle as gpo
from adm.gp_oracle import (
    BenchmarkConfig,
    OracleError,
    RegressionTask,
    benchmark_kernel,
    gp_predict,
    make_task,
    run_parity_benchmark,
    ssm_predict,
)
from adm.kernels import KINDS, MOSE, SE, Exp, gram_matrix


def _dense_se_task(seed, n=200, l=5.0, noise=0.25):
    """GP sample on 0..n-1 with every fifth point held out."""
    t = np.arange(float(n))
    k = gram_matrix(SE(1.0, l), t) + 1e-8 * np.eye(n)
    rng = np.random.default_rng(seed)
    y = np.linalg.cholesky(k) @ rng.normal(size=n) + math.sqrt(noise) * rng.normal(size=n)
    keep = t % 5 != 0
    return RegressionTask(t[keep], y[keep], t[~keep], y[~keep], noise, SE(1.0, l))


class TestRegressionTask:
    def test_overlapping_times_rejected(self):
        with pytest.raises(ValueError, match="disjoint"):
            RegressionTask([0.0, 1.0], [1.0, 2.0], [1.0], None, 0.1, SE())

    def test_duplicate_times_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            RegressionTask([0.0, 0.0], [1.0, 2.0], [1.0], None, 0.1, SE())

    def test_noise_must_be_positive(self):
        with pytest.raises(ValueError):
            RegressionTask([0.0], [1.0], [1.0], None, 0.0, SE())

    def test_multi_output_shape(self):
        task = RegressionTask([0.0, 1.0], np.ones((2, 2)), [2.0], None, 0.1, MOSE([0.0, 1.0], 2.0))
        assert task.train_y.shape == (2, 2)
        with pytest.raises(ValueError):
            RegressionTask([0.0, 1.0], np.ones((2, 3)), [2.0], None, 0.1, MOSE([0.0, 1.0], 2.0))


class TestGpPredict:
    def test_interpolation_limit(self):
        # test time 1e-9 away from a training point, vanishing noise
        task = RegressionTask([0.0, 1.0, 2.0], [0.3, -1.2, 0.7], [1.0 + 1e-9], None, 1e-12, SE(1.0, 1.0))
        assert gp_predict(task, jitter=0.0)[0, 0] == pytest.approx(-1.2, abs=1e-6)

    def test_zero_targets(self):
        task = RegressionTask([0.0, 1.0, 3.0], np.zeros(3), [2.0, 5.0], None, 0.2, SE(1.0, 2.0))
        np.testing.assert_array_equal(gp_predict(task), 0.0)

    def test_three_point_hand_solve(self):
        tr, y, ts, s2, l = [0.0, 1.0, 3.0], np.array([1.0, -0.5, 2.0]), 2.0, 0.1, 1.5

        def k(a, b):
            return math.exp(-((a - b) ** 2) / (2 * l * l))

        gram = [[k(a, b) + (s2 if a == b else 0.0) for b in tr] for a in tr]
        alpha = np.linalg.solve(np.array(gram), y)
        expected = sum(k(ts, b) * w for b, w in zip(tr, alpha))
        task = RegressionTask(tr, y, [ts], None, s2, SE(1.0, l))
        assert gp_predict(task, jitter=0.0)[0, 0] == pytest.approx(expected, abs=1e-10)

    def test_no_training_data(self):
        task = RegressionTask([], np.zeros((0, 1)), [1.0, 2.0], None, 0.1, SE())
        np.testing.assert_array_equal(gp_predict(task), 0.0)

    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        t = np.sort(rng.choice(40, size=12, replace=False)).astype(float)
        y = rng.normal(size=12)
        test = np.setdiff1d(np.arange(40.0), t)[:5]
        perm = rng.permutation(12)
        kern = SE(1.0, rng.uniform(1, 6))
        a = gp_predict(RegressionTask(t, y, test, None, 0.3, kern))
        b = gp_predict(RegressionTask(t[perm], y[perm], test, None, 0.3, kern))
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    def test_factorization_failure(self):
        task = RegressionTask([0.0, 1.0], [1.0, 2.0], [2.0], None, 1e-3, SE(1.0, 2.0))
        with pytest.raises(OracleError):
            gp_predict(task, jitter=-1.0)


class TestSsmPredict:
    def test_no_training_points_prior_mean(self):
        task = RegressionTask([], np.zeros((0, 1)), [0.0, 1.0, 2.0], None, 0.1, SE())
        np.testing.assert_array_equal(ssm_predict(task), 0.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_exp_order_one_is_exact(self, seed):
        # the exponential kernel is Markov of order 1; conversion jitter off
        rng = np.random.default_rng(seed)
        t = np.arange(120.0)
        perm = rng.permutation(120)
        tr, te = np.sort(perm[:80]), np.sort(perm[80:])
        y = rng.normal(size=120)
        task = RegressionTask(t[tr], y[tr], t[te], y[te], 0.25, Exp(1.0, 5.0))
        np.testing.assert_allclose(ssm_predict(task, 1, jitter=0.0), gp_predict(task), atol=1e-6)

    def test_exp_on_scaled_grid(self):
        t = 0.5 * np.arange(30.0)
        task = RegressionTask(t[::2], np.sin(t[::2]), t[1::2], None, 0.1, Exp(1.0, 2.0))
        np.testing.assert_allclose(ssm_predict(task, 1, jitter=0.0), gp_predict(task), atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_se_dense_training_agrees(self, seed):
        task = _dense_se_task(seed)
        g, s = gp_predict(task), ssm_predict(task, 8)
        rmse_gp = np.sqrt(np.mean((g - task.test_y) ** 2))
        rmse_ssm = np.sqrt(np.mean((s - task.test_y) ** 2))
        assert abs(rmse_ssm - rmse_gp) / rmse_gp < 0.02

    def test_se_dense_training_pointwise(self):
        num = den = 0.0
        for seed in range(5):
            task = _dense_se_task(seed)
            g, s = gp_predict(task), ssm_predict(task, 8)
            num += np.sum((s - g) ** 2)
            den += np.sum(g**2)
        assert math.sqrt(num / den) < 0.02

    @pytest.mark.parametrize("seed", range(5))
    def test_se_monotone_in_order(self, seed):
        task = _dense_se_task(seed)
        g = gp_predict(task)
        errs = [np.sqrt(np.mean((ssm_predict(task, p) - g) ** 2)) for p in (1, 2, 4)]
        assert errs[0] > errs[1] > errs[2]

    def test_off_grid_times(self):
        task = RegressionTask([0.0, 1.0, 2.5], [1.0, 2.0, 3.0], [1.7], None, 0.1, SE())
        with pytest.raises(ValueError, match="uniform grid"):
            ssm_predict(task)

    def test_multi_output_shapes(self):
        t = np.arange(20.0)
        k = MOSE([0.0, 2.0], 3.0)
        task = RegressionTask(t[::2], np.ones((10, 2)), t[1::2], None, 0.1, k)
        assert ssm_predict(task).shape == gp_predict(task).shape == (10, 2)


class TestBenchmark:
    def test_config_is_versioned(self):
        cfg = BenchmarkConfig()
        assert cfg.version == 1 and cfg.n_points == 300 and cfg.train_fraction == 0.6

    @pytest.mark.parametrize("kind", sorted(KINDS))
    def test_every_kind_has_a_kernel(self, kind):
        k = benchmark_kernel(kind)
        assert k.kind == kind

    def test_task_split(self):
        task = make_task("SE", 0)
        assert task.train_t.size == 180 and task.test_t.size == 120
        assert np.intersect1d(task.train_t, task.test_t).size == 0
        assert make_task("SE", 0).train_y.tobytes() == task.train_y.tobytes()

    def test_failed_cell_marked_and_rest_continue(self, monkeypatch):
        real = gpo.ssm_predict

        def flaky(task, *a, **kw):
            if task.kernel.kind == "Exp":
                raise OracleError("boom")
            return real(task, *a, **kw)

        monkeypatch.setattr(gpo, "ssm_predict", flaky)
        table = run_parity_benchmark([0, 1], ["Exp", "SE"])
        assert [c.failed for c in table.cells] == [True, True, False, False]
        assert "boom" in table.cells[0].error
        assert table.summary("Exp")["n_failed"] == 2 and math.isnan(table.summary("Exp")["ratio"])
        assert table.summary("SE")["n_ok"] == 2

    def test_rows_layout(self):
        table = run_parity_benchmark([0, 1], ["Exp", "Matern32"])
        rows = table.rows()
        assert rows[0] == ["model", "Exp", "Matern32"]
        assert [r[0] for r in rows[1:]] == ["GP", "SSM", "SSM/GP"]
        assert all("+-" in c for c in rows[1][1:])

    def test_threads_give_same_table(self):
        a = run_parity_benchmark([0, 1], ["Exp"])
        b = run_parity_benchmark([0, 1], ["Exp"], workers=2)
        assert [c.ssm_mse for c in a.cells] == [c.ssm_mse for c in b.cells]

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            run_parity_benchmark([0], ["Brownian"])

    def test_exp_parity_quick(self):
        s = run_parity_benchmark(range(5), ["Exp"]).summary("Exp")
        assert s["ratio"] <= 1.15
