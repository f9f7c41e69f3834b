"""Zeroth-order estimation: seed replay, estimator fidelity, memory."""

import numpy as np
import pytest
from scipy import stats

from coarsefine.errors import FrozenLayerError, InputError
from coarsefine.model import CalibrationSet, backprop_gradients, per_sample_losses
from coarsefine.zograd import (
    BufferMeter,
    ZOConfig,
    _regenerate,
    noise_seed,
    perturb_replay,
    zo_all_scores,
    zo_layer_score,
)

from conftest import random_batch, random_mlp, tiny_linear_model


class TestPerturbReplay:
    @pytest.mark.parametrize("seed", range(8))
    def test_round_trip_is_bit_exact(self, seed):
        rng = np.random.default_rng(seed)
        model = tiny_linear_model([rng.normal(size=(6, 9))])
        before = model.layer("L0").weight.tobytes()
        perturb_replay(model, "L0", (seed, 0, 0), 1e-3, 1)
        perturb_replay(model, "L0", (seed, 0, 0), 1e-3, -1)
        perturb_replay(model, "L0", (seed, 0, 0), 1e-3, "restore")
        assert model.layer("L0").weight.tobytes() == before

    def test_round_trip_with_extreme_scales(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(4, 8))
        w[0] *= 1e-12   # weights far below the perturbation scale
        w[1] *= 1e6
        w[2, :4] = 0.0  # exact zeros stay exact zeros
        model = tiny_linear_model([w.copy()])
        before = model.layer("L0").weight.tobytes()
        perturb_replay(model, "L0", 7, 1e-1, 1)
        perturb_replay(model, "L0", 7, 1e-1, -1)
        perturb_replay(model, "L0", 7, 1e-1, "restore")
        assert model.layer("L0").weight.tobytes() == before

    def test_plus_and_minus_states_match_noise(self):
        rng = np.random.default_rng(1)
        w0 = rng.normal(size=(3, 5))
        model = tiny_linear_model([w0.copy()])
        eps = 1e-3
        z = _regenerate((42, 0, 0), w0.size).reshape(w0.shape)
        perturb_replay(model, "L0", (42, 0, 0), eps, 1)
        np.testing.assert_allclose(model.layer("L0").weight, w0 + eps * z, rtol=1e-12)
        perturb_replay(model, "L0", (42, 0, 0), eps, -1)
        np.testing.assert_allclose(model.layer("L0").weight, w0 - eps * z, rtol=1e-12)
        perturb_replay(model, "L0", (42, 0, 0), eps, "restore")

    def test_different_seeds_differ(self):
        rng = np.random.default_rng(2)
        w0 = rng.normal(size=(3, 3))
        m1 = tiny_linear_model([w0.copy()])
        m2 = tiny_linear_model([w0.copy()])
        perturb_replay(m1, "L0", 1, 1e-3, 1)
        perturb_replay(m2, "L0", 2, 1e-3, 1)
        assert not np.array_equal(m1.layer("L0").weight, m2.layer("L0").weight)

    def test_zero_epsilon_rejected(self):
        model = tiny_linear_model([np.eye(2)])
        with pytest.raises(InputError):
            perturb_replay(model, "L0", 0, 0.0, 1)

    def test_frozen_layer_rejected(self):
        model = tiny_linear_model([np.eye(2)], frozen=[True])
        with pytest.raises(FrozenLayerError):
            perturb_replay(model, "L0", 0, 1e-3, 1)

    def test_cycle_protocol_enforced(self):
        model = tiny_linear_model([np.eye(2)])
        with pytest.raises(InputError):
            perturb_replay(model, "L0", 0, 1e-3, -1)  # no open cycle
        perturb_replay(model, "L0", 0, 1e-3, 1)
        with pytest.raises(InputError):
            perturb_replay(model, "L0", 0, 1e-3, 1)  # double plus
        perturb_replay(model, "L0", 0, 1e-3, "restore")

    def test_restore_directly_from_plus(self):
        rng = np.random.default_rng(3)
        model = tiny_linear_model([rng.normal(size=(5, 5))])
        before = model.layer("L0").weight.tobytes()
        perturb_replay(model, "L0", 9, 1e-3, 1)
        perturb_replay(model, "L0", 9, 1e-3, "restore")
        assert model.layer("L0").weight.tobytes() == before


class TestLayerScore:
    def test_flat_direction_scores_zero(self):
        # downstream weights are zero, so the loss ignores L0 entirely
        model = tiny_linear_model([np.eye(3), np.zeros((2, 3))])
        batch = CalibrationSet([(np.ones(3), np.ones(2))])
        score = zo_layer_score(model, "L0", batch, ZOConfig(seed=5))
        assert score == 0.0

    def test_quadratic_loss_gives_exact_directional_derivative(self):
        # L(w) = (w*x)^2 with x = 1: the paired difference is exactly
        # 2*w*z for every noise, central differences being exact on
        # quadratics
        model = tiny_linear_model([np.array([[1.0]])])
        batch = CalibrationSet([(np.array([1.0]), np.array([0.0]))])
        cfg = ZOConfig(epsilon=1e-3, seed=3)
        z = _regenerate(noise_seed(3, 0, 0), 1)[0]
        score = zo_layer_score(model, "L0", batch, cfg)
        assert score == pytest.approx(abs(2.0 * z), rel=1e-9)

    def test_half_normal_mean_on_quadratic_loss(self):
        # single linear layer + mse is quadratic in W, so each paired
        # estimate is exactly <grad, z>; |<g, z>| is half-normal with mean
        # sqrt(2/pi) * ||g||_F
        rng = np.random.default_rng(4)
        model = tiny_linear_model([rng.normal(size=(2, 4))])
        batch = CalibrationSet([(rng.normal(size=4), rng.normal(size=2))])
        g = backprop_gradients(model, batch)["L0"]
        expected = np.sqrt(2.0 / np.pi) * np.linalg.norm(g)
        cfg = ZOConfig(epsilon=1e-3, noises_per_sample=10_000, seed=0)
        score = zo_layer_score(model, "L0", batch, cfg)
        assert score == pytest.approx(expected, rel=0.05)

    def test_signed_estimate_is_mean_zero(self):
        # property: without the absolute value the estimate averages to ~0
        rng = np.random.default_rng(5)
        model = tiny_linear_model([rng.normal(size=(2, 3))])
        batch = CalibrationSet([(rng.normal(size=3), rng.normal(size=2))])
        eps = 1e-3
        vals = []
        for j in range(2000):
            key = noise_seed(11, 0, j)
            perturb_replay(model, "L0", key, eps, 1)
            lp = per_sample_losses(model, batch)[0]
            perturb_replay(model, "L0", key, eps, -1)
            lm = per_sample_losses(model, batch)[0]
            perturb_replay(model, "L0", key, eps, "restore")
            vals.append((lp - lm) / (2 * eps))
        g = backprop_gradients(model, batch)["L0"]
        sigma = np.linalg.norm(g)
        assert abs(np.mean(vals)) < 4 * sigma / np.sqrt(len(vals))

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(6)
        model = random_mlp(rng, [4, 5, 2])
        batch = random_batch(rng, 4, 4, 2)
        a = zo_layer_score(model, "L0", batch, ZOConfig(seed=9))
        b = zo_layer_score(model, "L0", batch, ZOConfig(seed=9))
        assert a == b

    def test_forward_cost_is_2k_per_noise(self):
        rng = np.random.default_rng(7)
        model = random_mlp(rng, [4, 3])
        batch = random_batch(rng, 5, 4, 3)
        model.forward_count = 0
        zo_layer_score(model, "L0", batch, ZOConfig(seed=0, noises_per_sample=3))
        assert model.forward_count == 2 * 5 * 3


class TestAllScores:
    def test_single_layer_composition(self):
        rng = np.random.default_rng(8)
        model = tiny_linear_model([rng.normal(size=(3, 4))])
        batch = random_batch(rng, 4, 4, 3)
        full = zo_all_scores(model, batch, ZOConfig(seed=1))
        single = zo_layer_score(model, "L0", batch, ZOConfig(seed=1))
        assert full.entries == {"L0": single}
        assert full.method == "zeroth_order"
        assert full.aggregation == "scalar"
        assert full.sample_count == 4

    def test_all_frozen_model_gives_empty_map(self):
        model = tiny_linear_model([np.eye(3), np.eye(3)], frozen=[True, True])
        batch = CalibrationSet([(np.ones(3), np.ones(3))])
        scores = zo_all_scores(model, batch, ZOConfig(seed=0))
        assert scores.entries == {}

    def test_ranking_matches_backprop_norms(self):
        # layers built with clearly separated gradient norms
        rng = np.random.default_rng(12)
        model = random_mlp(rng, [6, 8, 4], activation="relu")
        model.layer("L0").weight *= 0.2   # shrink to separate the norms
        batch = random_batch(rng, 4, 6, 4)
        grads = backprop_gradients(model, batch)
        true_norms = [np.linalg.norm(grads[n]) for n in ("L0", "L1")]
        scores = zo_all_scores(model, batch, ZOConfig(seed=2, noises_per_sample=256))
        est = [scores.entries["L0"], scores.entries["L1"]]
        rho = stats.spearmanr(true_norms, est).statistic
        assert rho >= 0.8

    def test_memory_meter_holds_one_noise_buffer(self):
        rng = np.random.default_rng(13)
        model = random_mlp(rng, [6, 12, 4])
        batch = random_batch(rng, 4, 6, 4)
        meter = BufferMeter()
        zo_all_scores(model, batch, ZOConfig(seed=0), meter=meter)
        biggest = max(l.size for l in model.prunable_layers())
        assert meter.peak_noise_buffers == 1
        assert meter.peak_noise_elements == biggest
        # noise plus the one compensation tail, never two layers of noise
        assert meter.peak_extra_elements <= 2 * biggest
        assert meter.current_extra_elements == 0


class TestZOConfig:
    def test_validation(self):
        with pytest.raises(InputError):
            ZOConfig(epsilon=0.0)
        with pytest.raises(InputError):
            ZOConfig(noises_per_sample=0)
        with pytest.raises(InputError):
            ZOConfig(seed=-1)
        with pytest.raises(InputError):
            ZOConfig(mode="global")
