import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adm.kernels import (
    KINDS,
    LMC,
    MOSE,
    SE,
    Exp,
    GridError,
    KernelParameterError,
    eval_block,
    gram_matrix,
    kernel_from_dict,
    kernel_to_dict,
    recommended_order,
)
from strategies import kernels


class TestEvalBlock:
    def test_mose_zero_delay_zero_lag_is_all_ones(self):
        k = MOSE([0.0, 0.0], 5.0)
        np.testing.assert_array_equal(eval_block(k, 0.0), np.ones((2, 2)))

    def test_mose_peak_at_negative_pair_delay(self):
        k = MOSE([0.0, 3.0], 5.0)
        assert eval_block(k, -3.0)[0, 1] == pytest.approx(1.0, abs=1e-15)
        # the mirrored entry peaks on the other side
        assert eval_block(k, 3.0)[1, 0] == pytest.approx(1.0, abs=1e-15)

    def test_se_at_one_length_scale(self):
        # oracle: plain scalar arithmetic
        assert eval_block(SE(1.0, 2.5), 2.5)[0, 0] == pytest.approx(math.exp(-0.5), rel=1e-14)
        assert math.exp(-0.5) == pytest.approx(0.6065, abs=1e-4)

    def test_vectorized_lags(self):
        k = MOSE([0.0, 1.0, -2.0], 3.0)
        taus = np.linspace(-4, 4, 7)
        stacked = eval_block(k, taus)
        assert stacked.shape == (7, 3, 3)
        for i, t in enumerate(taus):
            np.testing.assert_array_equal(stacked[i], eval_block(k, t))

    @pytest.mark.parametrize(
        "make",
        [
            lambda: SE(1.0, float("nan")),
            lambda: Exp(float("inf"), 1.0),
            lambda: MOSE([0.0, float("nan")], 2.0),
            lambda: SE(-1.0, 1.0),
            lambda: MOSE([1.0, 0.0], 2.0),
        ],
    )
    def test_invalid_parameters_rejected(self, make):
        with pytest.raises(KernelParameterError):
            make()

    def test_lmc_requires_psd(self):
        with pytest.raises(KernelParameterError):
            LMC(np.array([[[1.0, 2.0], [2.0, 1.0]]]), [1.0])


class TestRecommendedOrder:
    @pytest.mark.parametrize(
        "kind,p",
        [("Exp", 1), ("Matern32", 2), ("SE", 2), ("RQ", 4), ("SM", 2),
         ("MOSE", 2), ("MOSM", 2), ("CSM", 4), ("LMC", 2)],
    )
    def test_table(self, kind, p):
        assert recommended_order(kind) == p

    def test_unknown_kind(self):
        with pytest.raises(KernelParameterError):
            recommended_order("Brownian")


class TestGramMatrix:
    def test_single_time_is_one_block(self):
        k = MOSE([0.0, 2.0], 3.0)
        np.testing.assert_allclose(gram_matrix(k, [4.0]), eval_block(k, 0.0), atol=0)

    def test_se_toeplitz(self):
        g = gram_matrix(SE(1.0, 1.0), [0.0, 1.0, 2.0])
        row = [1.0, math.exp(-0.5), math.exp(-2.0)]
        expected = np.array([[row[abs(i - j)] for j in range(3)] for i in range(3)])
        np.testing.assert_allclose(g, expected, rtol=1e-14)

    def test_mose_two_steps_block_layout(self):
        k = MOSE([0.0, 2.0], 3.0)
        g = gram_matrix(k, [0.0, 1.0])
        np.testing.assert_allclose(g[:2, 2:], eval_block(k, -1.0), atol=1e-15)
        np.testing.assert_allclose(g[:2, 2:], eval_block(k, 1.0).T, atol=1e-15)
        np.testing.assert_allclose(g[2:, :2], eval_block(k, 1.0), atol=1e-15)

    @pytest.mark.parametrize("times", [[0.0, 1.0, 3.0], [0.0, 0.0, 1.0], [2.0, 1.0]])
    def test_bad_grid(self, times):
        with pytest.raises(GridError):
            gram_matrix(SE(), times)


class TestKernelProperties:
    @given(kernels(), st.floats(-20, 20))
    def test_reverse_lag_is_transpose(self, k, tau):
        np.testing.assert_allclose(eval_block(k, -tau), eval_block(k, tau).T, atol=1e-12)

    @given(kernels(), st.integers(2, 64))
    def test_gram_is_psd_after_jitter(self, k, t_len):
        g = gram_matrix(k, np.arange(t_len, dtype=float))
        assert np.allclose(g, g.T)
        jitter = 1e-6 * np.trace(g) / g.shape[0]
        np.linalg.cholesky(g + jitter * np.eye(g.shape[0]))

    @given(kernels(), st.floats(-30, 30))
    def test_entries_bounded_by_amplitudes(self, k, tau):
        assert np.all(np.abs(eval_block(k, tau)) <= k.amplitude_bound() * (1 + 1e-12) + 1e-15)

    @given(kernels(kinds=["Exp", "Matern32", "SE", "RQ", "SM"]))
    def test_single_output_variance_positive(self, k):
        assert k.n_outputs == 1
        assert eval_block(k, 0.0)[0, 0] > 0

    @given(kernels(kinds=["MOSE"], max_outputs=5), st.floats(-15, 15))
    def test_mose_swap_regions_and_negate_lag(self, k, tau):
        b, bm = eval_block(k, tau), eval_block(k, -tau)
        np.testing.assert_allclose(b, bm.T, atol=1e-14)

    @given(kernels(kinds=["MOSE"], max_outputs=5), st.floats(-15, 15))
    def test_mose_diagonal_is_se(self, k, tau):
        se = eval_block(SE(1.0, k.length_scale), tau)[0, 0]
        np.testing.assert_allclose(np.diag(eval_block(k, tau)), se, rtol=1e-14)

    @given(kernels(kinds=["MOSE"], max_outputs=4))
    def test_mose_pairwise_delays_antisymmetric(self, k):
        th = k.pairwise_delays()
        np.testing.assert_array_equal(th, -th.T)

    @given(kernels())
    def test_dict_round_trip(self, k):
        k2 = kernel_from_dict(kernel_to_dict(k))
        assert type(k2) is type(k)
        taus = np.linspace(-5, 5, 11)
        np.testing.assert_array_equal(eval_block(k2, taus), eval_block(k, taus))


def test_all_kinds_registered():
    assert set(KINDS) == {"Exp", "Matern32", "SE", "RQ", "SM", "MOSE", "MOSM", "CSM", "LMC"}
