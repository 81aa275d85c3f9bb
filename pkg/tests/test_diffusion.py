import numpy as np
import pytest

from malab import numerics as nx
from malab.numerics import Tensor
from malab.dit import DiTConfig, init_weights
from malab.diffusion import (Adam, GMMSpec, NoiseSchedule, default_mixture,
                             euler_sample, forward_noise, gmm_noise_oracle,
                             gmm_posterior_mean, sample_task_batch,
                             training_step)
from malab.workbench.metrics import metric_sliced_w2


class TestSchedule:
    def test_times_endpoints(self):
        sched = NoiseSchedule(sigma_max=3.0, steps=10)
        ts = sched.times()
        assert ts[0] == 3.0
        assert ts[-1] == 0.0
        assert len(ts) == 11
        assert np.all(np.diff(ts) < 0)

    def test_sigma_is_identity_in_range(self):
        sched = NoiseSchedule()
        assert sched.sigma(1.7) == 1.7
        with pytest.raises(ValueError):
            sched.sigma(3.5)

    def test_validation(self):
        with pytest.raises(ValueError):
            NoiseSchedule(sigma_max=0.0)
        with pytest.raises(ValueError):
            NoiseSchedule(steps=0)


class TestForwardNoise:
    def test_zero_time_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 2))
        eps = rng.standard_normal((4, 2))
        assert np.array_equal(forward_noise(x, 0.0, eps), x)

    def test_zero_noise(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 2))
        assert np.array_equal(forward_noise(x, 1.5, np.zeros((4, 2))), x)

    def test_linearity_from_origin(self):
        rng = np.random.default_rng(2)
        eps = rng.standard_normal((4, 2))
        out = forward_noise(np.zeros((4, 2)), 3.0, eps)
        assert np.array_equal(out, 3.0 * eps)

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeMismatchError):
            forward_noise(np.zeros((4, 2)), 1.0, np.zeros((3, 2)))

    def test_perfect_denoising_roundtrip(self):
        # (x + s*eps) - s*eps reconstructs x up to one rounding of the sum;
        # exact bit equality is not an IEEE-reachable target here
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 2))
        eps = rng.standard_normal((6, 2))
        z = forward_noise(x, 2.0, eps)
        assert np.allclose(z - 2.0 * eps, x, rtol=0.0, atol=1e-14)


class TestGMM:
    def test_weight_validation(self):
        with pytest.raises(ValueError):
            GMMSpec(np.zeros((2, 2)), 0.1, np.array([0.6, 0.5]))

    def test_single_component_zero_scale(self):
        gmm = GMMSpec(np.array([[1.0, -2.0]]), 0.0, np.array([1.0]))
        for z in ([0.0, 0.0], [5.0, 5.0], [-3.0, 1.0]):
            assert np.array_equal(gmm_posterior_mean(np.array(z), 0.7, gmm),
                                  [1.0, -2.0])

    def test_symmetric_midpoint(self):
        gmm = GMMSpec(np.array([[-1.0, 0.0], [1.0, 0.0]]), 0.3,
                      np.array([0.5, 0.5]))
        mid = gmm_posterior_mean(np.array([0.0, 0.0]), 1.0, gmm)
        assert np.allclose(mid, [0.0, 0.0], atol=1e-14)

    def test_against_quadrature(self):
        # direct numerical integration of E[x | z] over a 400x400 grid
        gmm = default_mixture()
        rng = np.random.default_rng(4)
        lim = 2.5
        xs = np.linspace(-lim, lim, 400)
        X0, X1 = np.meshgrid(xs, xs, indexing="ij")
        grid = np.stack([X0.ravel(), X1.ravel()], axis=1)
        # mixture density at grid points
        d2 = ((grid[:, None, :] - gmm.means[None]) ** 2).sum(-1)
        px = (gmm.weights[None] *
              np.exp(-d2 / (2 * gmm.scale ** 2)) /
              (2 * np.pi * gmm.scale ** 2)).sum(axis=1)
        for _ in range(4):
            z = rng.uniform(-1.5, 1.5, size=2)
            t = rng.uniform(0.4, 2.0)
            lik = np.exp(-((grid - z) ** 2).sum(-1) / (2 * t * t))
            post = px * lik
            expect = (grid * post[:, None]).sum(axis=0) / post.sum()
            got = gmm_posterior_mean(z, t, gmm)
            assert np.allclose(got, expect, atol=1e-3)

    def test_rejects_nonpositive_time(self):
        gmm = default_mixture()
        with pytest.raises(ValueError):
            gmm_posterior_mean(np.zeros(2), 0.0, gmm)

    def test_sampling_shapes_and_ids(self):
        gmm = default_mixture()
        pts, comp = gmm.sample(np.random.default_rng(5), 100)
        assert pts.shape == (100, 2)
        assert comp.min() >= 0 and comp.max() < 8


class TestEulerSample:
    def test_zero_denoiser_returns_initial_draw(self):
        sched = NoiseSchedule(sigma_max=3.0, steps=25)
        out = euler_sample(lambda z, t, c: np.zeros_like(z), sched,
                           c=0, seed=42, count=8, shape=(1, 2))
        expect = 3.0 * np.random.default_rng(42).standard_normal((8, 1, 2))
        assert np.array_equal(out, expect)

    def test_seed_determinism(self):
        gmm = default_mixture()
        sched = NoiseSchedule(steps=30)
        oracle = gmm_noise_oracle(gmm)
        a = euler_sample(oracle, sched, 0, seed=7, count=16, shape=(1, 2))
        b = euler_sample(oracle, sched, 0, seed=7, count=16, shape=(1, 2))
        assert np.array_equal(a, b)

    def test_wrong_shape_denoiser_rejected(self):
        sched = NoiseSchedule(steps=5)
        with pytest.raises(nx.ShapeMismatchError):
            euler_sample(lambda z, t, c: z[:, :, :1], sched, 0, 0, 4, (1, 2))

    def test_single_step_with_oracle_jumps_to_posterior_mean(self):
        # T=1: one Euler step lands exactly on E[x | z0], which for a tight
        # single component is the component mean
        gmm = GMMSpec(np.array([[0.2, 0.9]]), 1e-12, np.array([1.0]))
        sched = NoiseSchedule(sigma_max=3.0, steps=1)
        out = euler_sample(gmm_noise_oracle(gmm), sched, 0, seed=11,
                           count=32, shape=(1, 2))
        assert np.max(np.abs(out.reshape(-1, 2) - [0.2, 0.9])) < 1e-9

    def test_tight_single_component_collapses_to_mean(self):
        gmm = GMMSpec(np.array([[0.7, -0.4]]), 1e-9, np.array([1.0]))
        sched = NoiseSchedule(sigma_max=3.0, steps=200)
        out = euler_sample(gmm_noise_oracle(gmm), sched, 0, seed=1,
                           count=64, shape=(1, 2))
        assert np.max(np.abs(out.reshape(-1, 2) - [0.7, -0.4])) < 1e-6

    def test_oracle_matches_mixture_at_modest_size(self):
        gmm = default_mixture()
        sched = NoiseSchedule(sigma_max=3.0, steps=100)
        samples = euler_sample(gmm_noise_oracle(gmm), sched, 0, seed=3,
                               count=512, shape=(1, 2)).reshape(-1, 2)
        direct, _ = gmm.sample(np.random.default_rng(99), 512)
        assert metric_sliced_w2(samples, direct, 64, seed=5) < 0.15


class TestTraining:
    def _setup(self, batch=8):
        cfg = DiTConfig()
        w = init_weights(cfg, seed=0)
        sched = NoiseSchedule()
        gmm = default_mixture()
        rng = np.random.default_rng(0)
        batch_xc = sample_task_batch(gmm, cfg, rng, batch)
        return w, sched, batch_xc

    def test_oracle_injection_gives_zero_loss(self):
        w, sched, batch = self._setup()
        rng = np.random.default_rng(1)
        captured = {}

        def perfect(z, ts, cs):
            # reproduce the injected noise from the corruption identity
            x = batch[0]
            eps = (z - x) / ts[:, None, None]
            captured["eps"] = eps
            return Tensor(eps)

        opt = Adam(w.parameters())
        loss = training_step(w, batch, rng, sched, opt, _forward=perfect)
        assert loss < 1e-24

    def test_zero_predictor_loss_is_noise_power(self):
        w, sched, batch = self._setup()
        rng = np.random.default_rng(2)
        captured = {}

        def zero(z, ts, cs):
            x = batch[0]
            captured["eps"] = (z - x) / ts[:, None, None]
            return Tensor(np.zeros_like(z))

        opt = Adam(w.parameters())
        loss = training_step(w, batch, rng, sched, opt, _forward=zero)
        assert np.isclose(loss, np.mean(captured["eps"] ** 2), rtol=1e-10)

    def test_empty_batch_rejected(self):
        w, sched, _ = self._setup()
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            training_step(w, (np.zeros((0, 16, 2)), np.zeros(0, dtype=int)),
                          rng, sched, Adam(w.parameters()))

    def test_short_run_reduces_loss(self):
        cfg = DiTConfig()
        w = init_weights(cfg, seed=4)
        sched = NoiseSchedule()
        gmm = default_mixture()
        rng = np.random.default_rng(4)
        opt = Adam(w.parameters())
        losses = []
        for _ in range(60):
            batch = sample_task_batch(gmm, cfg, rng, 32)
            losses.append(training_step(w, batch, rng, sched, opt))
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_task_batch_is_class_conditional(self):
        cfg = DiTConfig()
        gmm = default_mixture()
        x, c = sample_task_batch(gmm, cfg, np.random.default_rng(5), 64)
        assert x.shape == (64, cfg.tokens, 2)
        # tokens of one sample hug their component's mean
        for i in range(8):
            spread = np.abs(x[i] - gmm.means[c[i]]).max()
            assert spread < 6 * gmm.scale
