import logging

import numpy as np
import pytest
from scipy.signal import correlate2d

from agcmnet import network as N
from agcmnet import nn
from agcmnet import tensor as T
from agcmnet.errors import ConfigError
from agcmnet.tensor import Tensor

SMALL = N.NetworkConfig(input_size=(32, 32), widths=(4, 4, 4, 4, 4), n_prototypes=3, n_edgeconv=2, k_nn=1)


def image(rng, size=(32, 32)):
    return Tensor(rng.uniform(size=(3, *size)))


class TestConfig:
    @pytest.mark.parametrize("size", [(48, 64), (16, 16), (0, 32)])
    def test_input_must_be_multiple_of_32(self, size):
        with pytest.raises(ConfigError):
            N.NetworkConfig(input_size=size)

    def test_bad_stage(self):
        with pytest.raises(ConfigError):
            N.NetworkConfig(agcm_stages=(6,))

    def test_hash_tracks_architecture(self):
        a = N.NetworkConfig()
        assert a.config_hash() == N.NetworkConfig().config_hash()
        assert a.config_hash() != a.replace(agcm_stages=(4,)).config_hash()
        assert len(a.config_hash()) == 8


class TestForward:
    def test_default_shapes(self, rng):
        cfg = N.NetworkConfig()
        params = N.build_params(cfg)
        img = image(rng, (64, 64))
        feats = N.encoder_forward(img, cfg, params)
        assert [f.shape for f in feats] == [(8, 32, 32), (16, 16, 16), (24, 8, 8), (32, 4, 4), (40, 2, 2)]
        skips = N.skip_forward(feats, cfg, params)
        assert [s.shape[0] for s in skips] == [8, 16, 24, 40, 48]
        out = N.model_forward(img, cfg, params).numpy()
        assert out.shape == (1, 64, 64)
        assert ((out > 0) & (out < 1)).all()

    def test_deterministic(self, rng):
        img = image(rng)
        a = N.model_forward(img, SMALL, N.build_params(SMALL, seed=5)).numpy()
        b = N.model_forward(img, SMALL, N.build_params(SMALL, seed=5)).numpy()
        np.testing.assert_array_equal(a, b)

    def test_wrong_size(self, rng):
        with pytest.raises(ConfigError):
            N.model_forward(image(rng, (64, 64)), SMALL, N.build_params(SMALL))

    def test_aspp_rate_fallback_warns_once(self, rng, caplog):
        params = N.build_params(SMALL)
        N._warned.clear()
        with caplog.at_level(logging.WARNING, logger="agcmnet.network"):
            N.model_forward(image(rng), SMALL, params)
            N.model_forward(image(rng), SMALL, params)
        assert N.effective_rates((1, 2, 4), 1, 1) == [1, 1, 1]
        # the 1x1 deepest map drops rates 2 and 4, each reported once
        assert sum("ASPP rate" in r.message for r in caplog.records) == 2

    @pytest.mark.parametrize("stages", [(), (4,), (5,), (4, 5), (1, 3)])
    def test_all_placements_run(self, rng, stages):
        cfg = SMALL.replace(agcm_stages=stages)
        assert N.model_forward(image(rng), cfg, N.build_params(cfg)).shape == (1, 32, 32)


def zero_biases(params):
    for p in params:
        if p.endswith(".bias"):
            params[p] = np.zeros(params[p].shape)
    return params


def aspp_store(c, rates, seed=0):
    store = nn.ParameterStore()
    N.declare_aspp(store, "aspp", c, len(rates))
    return nn.init_params(store, seed=seed)


def conv_same(x, w, b):
    """3x3 or 1x1 'same' convolution via scipy cross-correlation."""
    out = np.zeros((w.shape[0],) + x.shape[1:])
    for o in range(w.shape[0]):
        for i in range(x.shape[0]):
            out[o] += correlate2d(x[i], w[o, i], mode="same")
        out[o] += b[o]
    return out


class TestAspp:
    def test_unit_rates_match_plain_convs(self, rng):
        params = aspp_store(3, (1, 1))
        for p in params:
            if p.endswith(".bias"):
                params[p] = rng.normal(size=params[p].shape)
        g = {k: params[k].numpy() for k in params}
        x = rng.normal(size=(3, 5, 6))
        branches = [np.maximum(conv_same(x, g["aspp.b0.weight"], g["aspp.b0.bias"]), 0)]
        for i in range(2):
            branches.append(np.maximum(conv_same(x, g[f"aspp.r{i}.weight"], g[f"aspp.r{i}.bias"]), 0))
        want = np.maximum(conv_same(np.concatenate(branches), g["aspp.fuse.weight"], g["aspp.fuse.bias"]), 0)
        got = N.aspp_forward(Tensor(x), params, (1, 1)).numpy()
        np.testing.assert_allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("rates", [(1, 2, 4), (3,), (1, 6)])
    def test_keeps_spatial_size(self, rng, rates):
        x = Tensor(rng.normal(size=(2, 7, 9)))
        assert N.aspp_forward(x, aspp_store(2, rates), rates).shape == (2, 7, 9)

    def test_zero_kernels(self, rng):
        params = aspp_store(2, (1, 2))
        for p in params:
            params[p] = np.zeros(params[p].shape)
        assert not N.aspp_forward(Tensor(rng.normal(size=(2, 4, 4))), params, (1, 2)).numpy().any()


def test_zero_input_zero_features():
    cfg = N.NetworkConfig()
    params = zero_biases(N.build_params(cfg))
    feats = N.encoder_forward(Tensor(np.zeros((3, 64, 64))), cfg, params)
    assert not any(f.numpy().any() for f in feats)


class TestParameterCount:
    @pytest.mark.parametrize("stage", [1, 2, 3, 4, 5])
    def test_delta_closed_form(self, stage):
        cfg = N.NetworkConfig()
        without = N.declare_network(cfg.replace(agcm_stages=())).num_parameters()
        with_one = N.declare_network(cfg.replace(agcm_stages=(stage,))).num_parameters()
        assert with_one - without == N.agcm_parameter_delta(cfg, stage)

    def test_two_modules_add(self):
        cfg = N.NetworkConfig()
        base = N.declare_network(cfg.replace(agcm_stages=())).num_parameters()
        both = N.declare_network(cfg).num_parameters()
        assert both - base == N.agcm_parameter_delta(cfg, 4) + N.agcm_parameter_delta(cfg, 5)


class TestGradients:
    def test_sampled_grad_check(self, rng):
        params = N.build_params(SMALL, seed=1)
        target = Tensor(rng.uniform(size=(1, 32, 32)))

        def loss(x, ps=params):
            return (N.model_forward(x, SMALL, ps) * target).sum()

        idx = rng.choice(3 * 32 * 32, size=12, replace=False)
        assert T.grad_check(loss, image(rng), indices=idx) < 2e-4
        for path in ("enc1.conv1.weight", "agcm4.attn.weight", "agcm5.mlp.0.weight", "head.out.bias"):
            sub = rng.choice(params[path].size, size=min(4, params[path].size), replace=False)
            err = T.grad_check(lambda w, p=path: loss(image(np.random.default_rng(0)), params.with_override(p, w)),
                               params[path], indices=sub)
            assert err < 2e-4, path
