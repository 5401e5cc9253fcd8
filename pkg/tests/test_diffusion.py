"""Forward process, v-parameterization, loss equivalence, sampler steps."""

import numpy as np
import pytest

from varidiff.diffusion import (
    LossConfig,
    SamplerConfig,
    ddpm_step,
    diffusion_loss,
    eps_loss,
    forward_diffuse,
    guided_v,
    loss_given,
    predictions_from_v,
    sample,
    snr_weighted_x_loss,
    step_stddev,
    v_target,
)
from varidiff.schedule import ScheduleConfig, schedule_at
from varidiff.tensor import NonFiniteError, Tensor

SCFG = ScheduleConfig(image_resolution=16)


class TestForwardDiffuse:
    def test_zero_noise(self):
        sp = schedule_at(SCFG, 0.3)
        x = np.ones((2, 2))
        z = forward_diffuse(x, sp, np.zeros_like(x))
        np.testing.assert_allclose(z, sp.alpha * x)

    def test_endpoint_mostly_noise(self):
        sp = schedule_at(SCFG, SCFG.t_max_clip)
        x = np.ones((4, 4))
        eps = np.full((4, 4), 2.0)
        z = forward_diffuse(x, sp, eps)
        np.testing.assert_allclose(z, sp.sigma * eps, atol=2e-3)

    def test_shape_mismatch(self):
        sp = schedule_at(SCFG, 0.3)
        with pytest.raises(ValueError):
            forward_diffuse(np.ones((2, 2)), sp, np.ones(3))

    def test_monte_carlo_variance(self):
        # pooled variance of z over eps draws: alpha^2 Var(x) + sigma^2
        rng = np.random.default_rng(0)
        sp = schedule_at(SCFG, 0.45)
        x = rng.uniform(-1, 1, size=16)
        draws = np.stack([forward_diffuse(x, sp, rng.standard_normal(16)) for _ in range(10_000)])
        expected = sp.alpha**2 * np.var(x) + sp.sigma**2
        observed = np.var(draws)
        se = expected * np.sqrt(2.0 / (draws.size - 1))
        assert abs(observed - expected) < 3 * max(se, 1e-4)


class TestVParameterization:
    def test_round_trip_identity(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 5))
        eps = rng.standard_normal((3, 5))
        for t in (0.1, 0.5, 0.9):
            sp = schedule_at(SCFG, t)
            z = forward_diffuse(x, sp, eps)
            x_hat, eps_hat = predictions_from_v(z, v_target(x, eps, sp), sp)
            np.testing.assert_allclose(x_hat, x, atol=1e-12)
            np.testing.assert_allclose(eps_hat, eps, atol=1e-12)

    def test_t0_limit_v_equals_eps(self):
        sp = schedule_at(SCFG, SCFG.t_min_clip)
        x = np.ones(4)
        eps = np.full(4, 3.0)
        # resolution shift pushes the clipped floor slightly off alpha=1
        np.testing.assert_allclose(v_target(x, eps, sp), eps, atol=1e-3)

    def test_t1_limit_v_equals_minus_x(self):
        sp = schedule_at(SCFG, SCFG.t_max_clip)
        x = np.full(4, 2.0)
        eps = np.zeros(4)
        np.testing.assert_allclose(v_target(x, eps, sp), -x, atol=2e-3)

    def test_eps_space_equivalence(self):
        # SNR(t) ||x - x_hat||^2 == ||eps - eps_hat||^2 for any v output
        rng = np.random.default_rng(2)
        for _ in range(1000):
            t = rng.uniform(SCFG.t_min_clip, SCFG.t_max_clip)
            sp = schedule_at(SCFG, t)
            x = rng.standard_normal(6)
            eps = rng.standard_normal(6)
            v_hat = rng.standard_normal(6)
            z = forward_diffuse(x, sp, eps)
            x_hat, eps_hat = predictions_from_v(z, v_hat, sp)
            lhs = snr_weighted_x_loss(x, x_hat, sp)
            rhs = eps_loss(eps, eps_hat)
            assert abs(lhs - rhs) <= 1e-5 * max(rhs, 1e-12)


class TestDiffusionLoss:
    def test_perfect_oracle_gives_zero(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 4, 1)).astype(np.float32)

        def oracle(z, t, ctx):
            outs = []
            for i in range(len(t)):
                sp = schedule_at(SCFG, float(t[i]))
                outs.append((sp.alpha * z[i] - x[i]) / sp.sigma)
            return Tensor(np.stack(outs))

        loss = diffusion_loss(x, None, oracle, SCFG, np.random.default_rng(4))
        assert float(loss.data) < 1e-8

    def test_zero_v_closed_form(self):
        # v=0 on a fixed draw: loss = mean((eps - sigma z)^2), expanded
        # symbolically as mean((alpha^2 eps - alpha sigma x)^2)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 1, 1, 1))
        t = np.array([0.37])
        eps = rng.standard_normal(x.shape)
        sp = schedule_at(SCFG, float(t[0]))

        def zero_model(z, tt, ctx):
            return Tensor(np.zeros_like(z))

        loss = loss_given(x, t, eps, None, zero_model, SCFG)
        expected = np.mean((sp.alpha**2 * eps - sp.alpha * sp.sigma * x) ** 2)
        np.testing.assert_allclose(float(loss.data), expected, rtol=1e-6)

    def test_non_finite_loss_raises(self):
        x = np.full((1, 2, 2, 1), np.nan)

        def zero_model(z, tt, ctx):
            return Tensor(np.zeros_like(z))

        with pytest.raises(NonFiniteError):
            diffusion_loss(x, None, zero_model, SCFG, np.random.default_rng(6))

    def test_loss_config_allows_only_documented_combo(self):
        LossConfig()
        with pytest.raises(ValueError):
            LossConfig(parameterization="eps")
        with pytest.raises(ValueError):
            LossConfig(loss_space="x")


class TestDdpmStep:
    def setup_method(self):
        self.sp_t = schedule_at(SCFG, 0.6)
        self.sp_s = schedule_at(SCFG, 0.4)

    def test_eta_one_is_posterior_stddev(self):
        alpha_ts = self.sp_t.alpha / self.sp_s.alpha
        sigma_ts = np.sqrt(self.sp_t.sigma**2 - alpha_ts**2 * self.sp_s.sigma**2)
        posterior = sigma_ts * self.sp_s.sigma / self.sp_t.sigma
        assert step_stddev(self.sp_t, self.sp_s, 1.0) == pytest.approx(posterior, abs=0)

    def test_eta_zero_is_transition_stddev(self):
        alpha_ts = self.sp_t.alpha / self.sp_s.alpha
        sigma_ts = np.sqrt(self.sp_t.sigma**2 - alpha_ts**2 * self.sp_s.sigma**2)
        assert step_stddev(self.sp_t, self.sp_s, 0.0) == pytest.approx(float(sigma_ts), abs=0)

    def test_geometric_interpolation_value(self):
        # eta=0.2 with stddevs 0.1 / 0.3 evaluates to 0.1^0.2 * 0.3^0.8
        expected = 0.1**0.2 * 0.3**0.8
        assert abs(expected - 0.24082246852806923) < 1e-12
        got = _interp_value(0.1, 0.3, 0.2)
        assert abs(got - expected) < 1e-12

    def test_stddev_interpolates_between_endpoints(self):
        low = step_stddev(self.sp_t, self.sp_s, 1.0)
        high = step_stddev(self.sp_t, self.sp_s, 0.0)
        mid = step_stddev(self.sp_t, self.sp_s, 0.2)
        assert low < mid < high
        assert abs(mid - low**0.2 * high**0.8) < 1e-12

    def test_non_monotone_t_rejected(self):
        cfg = SamplerConfig()
        with pytest.raises(ValueError):
            ddpm_step(np.zeros((1, 2)), np.zeros((1, 2)), self.sp_s, self.sp_t, cfg, None)

    def test_deterministic_given_rng(self):
        cfg = SamplerConfig(variance_interp=0.2)
        z = np.random.default_rng(7).standard_normal((2, 3)).astype(np.float32)
        v = np.zeros_like(z)
        a = ddpm_step(z, v, self.sp_t, self.sp_s, cfg, np.random.default_rng(8))
        b = ddpm_step(z, v, self.sp_t, self.sp_s, cfg, np.random.default_rng(8))
        assert np.array_equal(a, b)


def _interp_value(sigma_low, sigma_high, eta):
    return sigma_low**eta * sigma_high ** (1.0 - eta)


class TestGuidance:
    def test_zero_guidance_is_conditional(self):
        v_c = np.array([1.0, 2.0])
        v_u = np.array([0.0, 5.0])
        np.testing.assert_array_equal(guided_v(v_c, v_u, 0.0), v_c)

    def test_equal_predictions_unchanged(self):
        v = np.array([1.5, -2.0])
        for g in (0.0, 0.5, 3.0):
            np.testing.assert_allclose(guided_v(v, v, g), v)

    def test_formula_value(self):
        np.testing.assert_allclose(guided_v(np.array([1.0]), np.array([0.0]), 0.5), [1.5])

    def test_negative_guidance_rejected(self):
        with pytest.raises(ValueError):
            guided_v(np.zeros(2), np.zeros(2), -0.1)


class TestSample:
    def _oracle_for(self, x):
        def oracle(z, t, ctx):
            sp = schedule_at(SCFG, float(t[0]))
            return (sp.alpha * z - x) / sp.sigma

        return oracle

    def test_single_step_oracle_recovers_x(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(-1, 1, size=(1, 4, 4, 3)).astype(np.float32)
        out = sample(
            self._oracle_for(x), None, SamplerConfig(num_steps=1), SCFG, x.shape,
            np.random.default_rng(10),
        )
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_fixed_seed_bit_identical(self):
        x = np.zeros((1, 4, 4, 1), dtype=np.float32)
        cfg = SamplerConfig(num_steps=8)
        a = sample(self._oracle_for(x), None, cfg, SCFG, x.shape, np.random.default_rng(11))
        b = sample(self._oracle_for(x), None, cfg, SCFG, x.shape, np.random.default_rng(11))
        assert np.array_equal(a, b)

    def test_output_shape(self):
        x = np.zeros((3, 4, 4, 2), dtype=np.float32)
        out = sample(
            self._oracle_for(x), None, SamplerConfig(num_steps=2), SCFG, (3, 4, 4, 2),
            np.random.default_rng(12),
        )
        assert out.shape == (3, 4, 4, 2)

    def test_guidance_calls_model_twice(self):
        calls = []

        def model(z, t, ctx):
            calls.append(ctx)
            return np.zeros_like(z)

        sample(model, "CTX", SamplerConfig(num_steps=2, guidance=0.5), SCFG, (1, 2, 2, 1),
               np.random.default_rng(13))
        assert calls == ["CTX", None, "CTX", None]

    def test_sampler_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(num_steps=0)
        with pytest.raises(ValueError):
            SamplerConfig(variance_interp=1.5)
        with pytest.raises(ValueError):
            SamplerConfig(guidance=-1.0)
