import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import agcm_checks
import oracles
from agcmnet import agcm as A
from agcmnet import nn
from agcmnet import tensor as T
from agcmnet.errors import ConfigError, ShapeError
from agcmnet.gradcheck import GradcheckConfig, run_gradcheck
from agcmnet.tensor import Tensor


def build(cfg, seed=0):
    store = nn.ParameterStore()
    A.declare_agcm(store, "agcm", cfg)
    return nn.init_params(store, seed=seed)


class TestConfig:
    def test_k_nn_range(self):
        with pytest.raises(ConfigError):
            A.AgcmConfig(4, n_prototypes=3, k_nn=3)
        with pytest.raises(ConfigError):
            A.AgcmConfig(4, n_prototypes=3, k_nn=0)

    def test_unknown_similarity(self):
        with pytest.raises(ConfigError):
            A.AgcmConfig(4, similarity="l1")

    @pytest.mark.parametrize("c,k,n", [(4, 3, 1), (8, 8, 3), (16, 5, 2)])
    def test_param_count_closed_form(self, c, k, n):
        cfg = A.AgcmConfig(c, n_prototypes=k, n_layers=n, k_nn=1)
        expected = c * k + n * (2 * c * c + c + c * c + c) + 4 * c * c + 3 * c + 2 * (c * c + c)
        assert build(cfg).num_parameters() == A.agcm_param_count(cfg) == expected


class TestKnn:
    def test_ties_go_to_lower_index(self):
        P = np.array([[0.0, 1.0, -1.0, 2.0]])
        assert A.knn_graph(P, 2).neighbors[0].tolist() == [1, 2]

    def test_excludes_self_with_duplicates(self):
        P = np.zeros((2, 3))
        assert A.knn_graph(P, 2).neighbors.tolist() == [[1, 2], [0, 2], [0, 1]]

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 7)),
                  elements=st.integers(-3, 3).map(float)), st.data())
    def test_matches_brute_force(self, P, data):
        k_nn = data.draw(st.integers(1, P.shape[1] - 1))
        assert (A.knn_graph(P, k_nn).neighbors == oracles.knn(P, k_nn)).all()

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            A.knn_graph(np.zeros((2, 3)), 3)


class TestForward:
    def test_output_shape(self, rng):
        cfg = A.AgcmConfig(4, n_prototypes=5, k_nn=2)
        out = A.agcm_forward(Tensor(rng.normal(size=(4, 6, 7))), cfg, build(cfg))
        assert out.shape == (9, 6, 7)

    def test_input_channels_pass_through(self, rng):
        cfg = A.AgcmConfig(4, n_prototypes=3, k_nn=1)
        x = rng.normal(size=(4, 5, 5))
        out = A.agcm_forward(Tensor(x), cfg, build(cfg)).numpy()
        np.testing.assert_array_equal(out[:4], x)

    def test_channel_mismatch(self, rng):
        cfg = A.AgcmConfig(4, n_prototypes=3, k_nn=1)
        with pytest.raises(ShapeError):
            A.agcm_forward(Tensor(rng.normal(size=(6, 4, 4))), cfg, build(cfg))

    def test_few_pixels_warn_once(self, rng, caplog):
        cfg = A.AgcmConfig(2, n_prototypes=5, k_nn=1)
        params = build(cfg)
        with caplog.at_level(logging.WARNING, logger="agcmnet.agcm"):
            for _ in range(3):
                A.agcm_forward(Tensor(rng.normal(size=(2, 1, 3))), cfg, params, prefix="agcm")
        assert sum("degenerate" in r.message for r in caplog.records) == 1

    def test_cosine_scores_bounded(self, rng):
        cfg = A.AgcmConfig(4, n_prototypes=3, k_nn=1, similarity="cosine")
        _, tr = A.agcm_forward(Tensor(rng.normal(size=(4, 5, 5))), cfg, build(cfg), trace=True)
        assert np.abs(tr.scores.numpy()).max() <= 1.0 + 1e-12

    def test_dynamic_graph_runs(self, rng):
        cfg = A.AgcmConfig(4, n_prototypes=5, n_layers=3, k_nn=2, dynamic_graph=True)
        out = A.agcm_forward(Tensor(rng.normal(size=(4, 4, 4))), cfg, build(cfg))
        assert np.isfinite(out.numpy()).all()

    def test_refined_columns_are_convex_combinations(self, rng):
        cfg = A.AgcmConfig(4, n_prototypes=4, k_nn=2)
        _, tr = A.agcm_forward(Tensor(rng.normal(size=(4, 5, 5))), cfg, build(cfg), trace=True)
        rew, ref = tr.reweighted.numpy(), tr.refined.numpy()
        assert (ref <= rew.max(axis=1, keepdims=True) + 1e-12).all()
        assert (ref >= rew.min(axis=1, keepdims=True) - 1e-12).all()

    def test_adjacency_symmetric_psd(self, rng):
        E = rng.normal(size=(3, 5))
        a = A.adjacency(Tensor(E)).numpy()
        np.testing.assert_allclose(a, a.T)
        assert np.linalg.eigvalsh(a).min() > -1e-12


class TestOracles:
    def test_stage_oracles(self):
        worst = agcm_checks.oracle_errors(n_instances=30, seed=11)
        assert max(worst.values()) <= 1e-12, worst

    def test_permutation(self):
        worst = agcm_checks.permutation_errors(n_pairs=30, seed=12)
        assert max(worst.values()) <= 1e-9, worst

    def test_normalization(self):
        worst = agcm_checks.normalization_errors(n_instances=30, seed=13)
        assert max(worst.values()) <= 1e-9, worst


class TestGradcheck:
    @pytest.mark.parametrize("seed", range(5))
    def test_every_stage_passes(self, seed):
        rows = run_gradcheck(GradcheckConfig(), seed)
        assert len(rows) == 6 and rows[-1].stage == "agcm_forward"
        for row in rows:
            assert row.passed, row
        assert rows[-1].max_rel_err < 1e-4

    def test_corrupted_backward_names_stage(self):
        with T.perturb_backward("softmax", 1.3):
            rows = run_gradcheck(GradcheckConfig(), 0)
        failed = {r.stage for r in rows if not r.passed}
        assert "generate_prototypes" in failed and "refine" in failed
        assert "reweight" not in failed

    def test_map_size_limit(self):
        with pytest.raises(ConfigError):
            GradcheckConfig(height=9)
