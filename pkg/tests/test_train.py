import math

import numpy as np
import pytest

from sigmoe.data import GroundTruthConfig, generate_dataset, make_rng, sample_ground_truth
from sigmoe.model import Activation, Gating, MixingMeasure, mean_squared_error, sigmoid
from sigmoe.train import DivergedError, TrainConfig, fit, init_near_truth
from sigmoe.voronoi import l2_distance


def small_truth(seed=0, activation="relu", d=8, k_star=4, **kw):
    return sample_ground_truth(GroundTruthConfig(d=d, k_star=k_star, activation=activation, seed=seed, **kw))


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.k, cfg.epochs, cfg.lr, cfg.batch_size, cfg.init_perturb) == (9, 10, 0.1, 32, 0.01)
    for bad in (dict(k=0), dict(epochs=0), dict(lr=0.0), dict(batch_size=0), dict(init_perturb=-1.0),
                dict(batches_per_epoch=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_effective_batch_size():
    assert TrainConfig(batch_size=32).effective_batch_size(10_000) == 32
    cfg = TrainConfig(batches_per_epoch=100, min_batch_size=8)
    assert cfg.effective_batch_size(10_000) == 100
    assert cfg.effective_batch_size(10_050) == 101
    assert cfg.effective_batch_size(300) == 8


class TestInit:
    def test_zero_noise_no_surplus_is_truth(self):
        G = small_truth()
        assert init_near_truth(G, G.k, 0.0, make_rng(0)) == G

    def test_split_bias(self):
        G = small_truth().replace(beta0=np.array([0.3, -0.1, 0.2, 0.0]))
        init = init_near_truth(G, G.k + 1, 0.0, make_rng(0))
        assert init.k == 5
        assert init.beta0[3] == init.beta0[4] == pytest.approx(-1.0986122886681098, abs=1e-15)
        assert sigmoid(init.beta0[3]) + sigmoid(init.beta0[4]) == pytest.approx(0.5, abs=1e-15)
        np.testing.assert_array_equal(init.a[4], G.a[3])
        np.testing.assert_array_equal(init.beta0[:3], G.beta0[:3])

    def test_split_preserves_function(self):
        G = small_truth(seed=3)
        init = init_near_truth(G, G.k + 2, 0.0, make_rng(0))
        assert l2_distance(init, G, 20_000, seed=1) < 1e-12

    def test_softmax_split_preserves_function(self):
        G = small_truth(seed=3, gating=Gating.SOFTMAX)
        init = init_near_truth(G, G.k + 1, 0.0, make_rng(0))
        assert l2_distance(init, G, 20_000, seed=1) < 1e-12

    @pytest.mark.parametrize("perturb", [1e-3, 1e-2])
    def test_close_in_function_space(self, perturb):
        for seed in range(5):
            G = small_truth(seed=seed)
            init = init_near_truth(G, G.k + 1, perturb, make_rng(seed))
            assert l2_distance(init, G, 20_000, seed=seed) <= 10 * perturb

    def test_noise_scale(self):
        G = small_truth(d=32, k_star=8)
        init = init_near_truth(G, 8, 0.05, make_rng(1))
        assert np.std(init.flatten() - G.flatten()) == pytest.approx(0.05, rel=0.1)

    def test_too_few_atoms(self):
        G = small_truth()
        with pytest.raises(ValueError):
            init_near_truth(G, G.k - 1, 0.0, make_rng(0))


class TestFit:
    def test_stationary_at_truth(self):
        G = small_truth()
        ds = generate_dataset(G, 500, 0.0, make_rng(1))
        res = fit(ds, G, TrainConfig(k=G.k, epochs=3), make_rng(2))
        assert res.final_loss == 0.0
        assert res.fitted == G

    def test_noise_floor_after_training(self):
        G = small_truth()
        ds = generate_dataset(G, 10_000, 0.01, make_rng(1))
        rng = make_rng(2)
        init = init_near_truth(G, 5, 0.01, rng)
        res = fit(ds, init, TrainConfig(k=5), rng)
        assert len(res.loss_trace) == 10
        assert all(math.isfinite(v) and v >= 0 for v in res.loss_trace)
        assert res.final_loss <= 1.5 * 0.01
        assert mean_squared_error(res.fitted, ds.X, ds.Y) <= 1.5 * 0.01

    def test_loss_at_truth_is_noise_variance(self):
        G = small_truth(d=32, k_star=8)
        for seed in range(5):
            ds = generate_dataset(G, 10_000, 0.01, make_rng(seed))
            assert mean_squared_error(G, ds.X, ds.Y) == pytest.approx(0.01, rel=0.2)

    def test_deterministic(self):
        G = small_truth()
        ds = generate_dataset(G, 1000, 0.01, make_rng(1))
        runs = []
        for _ in range(2):
            rng = make_rng(9)
            runs.append(fit(ds, init_near_truth(G, 5, 0.01, rng), TrainConfig(k=5, epochs=3), rng))
        assert runs[0].fitted == runs[1].fitted
        assert runs[0].loss_trace == runs[1].loss_trace

    def test_loss_goes_down(self):
        G = small_truth(activation="gelu")
        drops = []
        for seed in range(20):
            ds = generate_dataset(G, 2000, 0.01, make_rng(seed))
            rng = make_rng(1000 + seed)
            init = init_near_truth(G, 5, 0.05, rng)
            res = fit(ds, init, TrainConfig(k=5, epochs=5), rng)
            drops.append(res.loss_trace[-1] - res.loss_trace[0])
        assert np.median(drops) < 0

    def test_divergence_is_reported(self):
        G = small_truth(activation=Activation.polynomial(3))
        ds = generate_dataset(G, 256, 0.01, make_rng(1))
        init = init_near_truth(G, 5, 0.5, make_rng(2))
        with pytest.raises(DivergedError) as info:
            fit(ds, init, TrainConfig(k=5, lr=1e6, epochs=3), make_rng(3))
        assert info.value.epoch >= 0 and info.value.batch >= 0

    def test_dimension_mismatch(self):
        G = small_truth()
        ds = generate_dataset(G, 10, 0.01, make_rng(1))
        other = MixingMeasure([0.0], np.zeros((1, 3)), np.zeros((1, 3)), [0.0])
        with pytest.raises(ValueError):
            fit(ds, other, TrainConfig(k=1), make_rng(0))

    def test_trace_csv(self):
        G = small_truth()
        ds = generate_dataset(G, 100, 0.01, make_rng(1))
        res = fit(ds, G, TrainConfig(k=4, epochs=2), make_rng(0))
        lines = res.trace_csv().splitlines()
        assert lines[0] == "epoch,loss" and len(lines) == 3


def test_softmax_sgd_conserves_gate_sums():
    # softmax is invariant to a common shift of all gate parameters, so the
    # gradient sums to zero over atoms and SGD cannot remove a shared offset
    G = small_truth(gating=Gating.SOFTMAX)
    ds = generate_dataset(G, 2000, 0.01, make_rng(1))
    rng = make_rng(2)
    init = init_near_truth(G, 5, 0.1, rng)
    res = fit(ds, init, TrainConfig(k=5, epochs=3), rng)
    np.testing.assert_allclose(res.fitted.beta1.sum(axis=0), init.beta1.sum(axis=0), atol=1e-12)
    assert res.fitted.beta0.sum() == pytest.approx(init.beta0.sum(), abs=1e-12)
    assert np.abs(res.fitted.beta1 - init.beta1).max() > 1e-4
