import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import smooth_prior
from dosegp.affine import (LOG_LAMBDA_PRIOR_VAR, NUGGET, AffineGeometry, AffineHyper, GibbsSampler, McmcSamples,
                           affine_kernel, gibbs_sweep, log_hyperprior, posterior_summary, run_mcmc)
from dosegp.backdoor import build_dose_response_prior, fit_observational_model
from dosegp.data import InterventionalDataset, standardize
from dosegp.errors import InputError, NumericalError
from dosegp.synth import generate_problem, sample_interventional


class TestKernel:
    def test_diagonal(self, prior5):
        geo = AffineGeometry.from_prior(prior5)
        for t, x in enumerate(prior5.grid.levels):
            assert affine_kernel(x, x, 0.7, 0.3, prior5) == pytest.approx(0.7 * geo.v[t] ** 2 + NUGGET)

    def test_rescalings(self, prior5):
        geo = AffineGeometry.from_prior(prior5)
        assert geo.v[np.argmax(np.diag(prior5.cov))] == 1.0
        assert geo.x_hat[0] == 0.0 and geo.x_hat[-1] == 1.0
        assert geo.y_hat.min() == 0.0 and geo.y_hat.max() == 1.0

    def test_flat_mean_gives_zero_y_hat(self, prior5):
        flat = type(prior5)(prior5.grid, np.full(5, 0.3), prior5.cov, {})
        assert np.all(AffineGeometry.from_prior(flat).y_hat == 0.0)

    def test_matches_matrix(self, prior5):
        K = AffineGeometry.from_prior(prior5).matrix(1.3, 0.4)
        x = prior5.grid.levels
        pair = np.array([[affine_kernel(u, v, 1.3, 0.4, prior5) for v in x] for u in x])
        np.testing.assert_allclose(K, pair, rtol=1e-13)

    @settings(max_examples=40)
    @given(st.floats(1e-6, 1e3), st.floats(1e-3, 1e3))
    def test_psd(self, lam, sigma):
        K = AffineGeometry.from_prior(smooth_prior()).matrix(lam, sigma)
        np.testing.assert_array_equal(K, K.T)
        assert np.linalg.eigvalsh(K).min() > 0


class TestHyperprior:
    def test_lambda_one_is_the_mode(self):
        base = log_hyperprior(AffineHyper())
        for lam in (0.5, 0.9, 1.1, 2.0):
            assert log_hyperprior(AffineHyper(lambda_a=lam)) < base

    def test_log_lambda_term_is_normal_density(self):
        terms = log_hyperprior(AffineHyper(lambda_a=1.0)) - log_hyperprior(AffineHyper(lambda_a=np.e))
        expected = stats.norm.logpdf(0, scale=np.sqrt(0.5)) - stats.norm.logpdf(1, scale=np.sqrt(0.5))
        assert terms == pytest.approx(expected)

    def test_mass_below_two_point_five(self):
        rng = np.random.default_rng(0)
        lam = np.exp(rng.normal(0, np.sqrt(LOG_LAMBDA_PRIOR_VAR), 1_000_000))
        p = np.mean(lam < 2.5)
        exact = stats.norm.cdf(np.log(2.5) / np.sqrt(LOG_LAMBDA_PRIOR_VAR))
        assert abs(p - exact) < 3 * np.sqrt(exact * (1 - exact) / lam.size)
        assert p == pytest.approx(0.90, abs=0.01)

    def test_jeffreys_term(self):
        a = log_hyperprior(AffineHyper(noise_variance=1.0))
        b = log_hyperprior(AffineHyper(noise_variance=np.e))
        assert a - b == pytest.approx(1.0)

    def test_positivity(self):
        with pytest.raises(InputError):
            AffineHyper(lambda_a=0.0)


def replicated_data(prior, per_dose, rng, noise=0.1, curve=None):
    x = np.repeat(prior.grid.levels, per_dose)
    f = prior.mean if curve is None else curve
    y = np.repeat(f, per_dose) + np.sqrt(noise) * rng.standard_normal(x.size)
    return InterventionalDataset(y, x)


class TestGibbs:
    def test_collapsed_distortion_stays_at_one(self, prior5):
        rng = np.random.default_rng(0)
        data = replicated_data(prior5, 2, rng)
        sampler = GibbsSampler(prior5, data, update_hyper=False)
        state = sampler.initial_state(AffineHyper(lambda_a=1e-12, noise_variance=0.1))
        for _ in range(200):
            state = sampler.sweep(state, rng)
            # with lambda_a negligible only the 1e-5 nugget remains: sd ~ 0.003
            assert np.max(np.abs(state.a - 1.0)) < 20 * np.sqrt(NUGGET)

    def test_noise_draw_is_inverse_gamma(self, prior5):
        rng = np.random.default_rng(1)
        data = replicated_data(prior5, 3, rng)
        sampler = GibbsSampler(prior5, data, update_hyper=False)
        state = sampler.initial_state(AffineHyper(noise_variance=0.2))
        f = sampler.sweep(state, rng).f
        ss = float(np.sum((data.y - f[sampler.idx]) ** 2))
        draws = [sampler.draw_noise(f, rng) for _ in range(4000)]
        assert stats.kstest(draws, stats.invgamma(0.5 * sampler.M, scale=0.5 * ss).cdf).pvalue > 0.01

    def test_off_grid_data_rejected(self, prior5):
        with pytest.raises(InputError):
            gibbs_sweep(GibbsSampler(prior5).initial_state(), prior5, InterventionalDataset([1.0], [0.1234]),
                        np.random.default_rng(0))

    def test_identity_holds_in_every_draw(self, prior5):
        rng = np.random.default_rng(2)
        s = run_mcmc(prior5, replicated_data(prior5, 2, rng), iterations=60, burn_in=10, thin=5, seed=1)
        np.testing.assert_array_equal(s.f, s.a * s.f_obs + s.b)
        np.testing.assert_array_equal(s.final_state.f, s.final_state.a * s.final_state.f_obs + s.final_state.b)


class TestRunMcmc:
    def test_deterministic(self, prior5):
        data = replicated_data(prior5, 2, np.random.default_rng(3))
        a = run_mcmc(prior5, data, iterations=80, burn_in=20, thin=3, seed=11)
        b = run_mcmc(prior5, data, iterations=80, burn_in=20, thin=3, seed=11)
        np.testing.assert_array_equal(a.f, b.f)
        np.testing.assert_array_equal(a.hyper, b.hyper)

    def test_schedule_accounting(self, prior5):
        s = run_mcmc(prior5, None, iterations=2200, burn_in=200, thin=10, seed=0, update_hyper=False)
        assert len(s) == 200
        with pytest.raises(InputError):
            run_mcmc(prior5, None, iterations=10, burn_in=10)

    def test_no_data_reproduces_prior(self, prior5):
        s = run_mcmc(prior5, None, iterations=3000, burn_in=0, thin=1, seed=4)
        se = np.sqrt(np.diag(prior5.cov) / len(s))
        assert np.all(np.abs(s.f_obs.mean(axis=0) - prior5.mean) < 3.5 * se)
        mean, _ = posterior_summary(s)
        assert np.all(np.abs(mean - prior5.mean) < 0.15)

    def test_likelihood_dominated_limit(self, prior5):
        rng = np.random.default_rng(5)
        noise = 1e-4
        truth = prior5.mean + 0.4 * np.cos(3 * prior5.grid.levels)
        data = replicated_data(prior5, 100, rng, noise=noise, curve=truth)
        sampler = GibbsSampler(prior5, data)
        s = run_mcmc(prior5, data, iterations=600, burn_in=100, thin=1, seed=6,
                     init=sampler.initial_state(AffineHyper(noise_variance=noise)), update_noise=False)
        mean = s.f.mean(axis=0)
        se = np.sqrt(noise / 100)
        assert np.all(np.abs(mean - sampler.ybar) < 3 * se)

    def test_clamps(self, prior5):
        data = replicated_data(prior5, 2, np.random.default_rng(7))
        s = run_mcmc(prior5, data, iterations=30, burn_in=0, thin=1, clamp_a=True, clamp_b=True)
        assert np.all(s.a == 1.0) and np.all(s.b == 0.0)

    def test_error_carries_iteration(self, prior5, monkeypatch):
        calls = {"n": 0}
        original = GibbsSampler.sweep

        def flaky(self, state, rng):
            calls["n"] += 1
            if calls["n"] == 4:
                raise NumericalError("boom")
            return original(self, state, rng)

        monkeypatch.setattr(GibbsSampler, "sweep", flaky)
        with pytest.raises(NumericalError, match="iteration 3") as info:
            run_mcmc(prior5, None, iterations=10, burn_in=0)
        assert info.value.diagnostics["iteration"] == 3

    def test_json_round_trip(self, prior5, tmp_path):
        s = run_mcmc(prior5, None, iterations=20, burn_in=0, thin=2, seed=9)
        s.save(tmp_path / "s.json")
        back = McmcSamples.load(tmp_path / "s.json")
        np.testing.assert_array_equal(back.f, s.f)
        assert back.thin == 2 and back.seed == 9


class TestSummary:
    def _samples(self, f):
        f = np.asarray(f, dtype=float)
        return McmcSamples(f, np.ones_like(f), np.zeros_like(f), np.ones((f.shape[0], 5)), 0, 0, 1, f.shape[0])

    def test_two_draws(self):
        mean, var = posterior_summary(self._samples([[0.0], [2.0]]))
        assert mean[0] == 1.0 and var[0] == 2.0

    def test_constant_draws(self):
        assert np.all(posterior_summary(self._samples(np.full((5, 3), 1.5)))[1] == 0)

    def test_needs_two_draws(self):
        with pytest.raises(InputError):
            posterior_summary(self._samples([[1.0]]))


def test_observational_latent_moves_less_than_f():
    # ten outcomes per dose on a synthetic world: the data should mostly
    # reshape f through a and b while f_obs stays near its prior
    problem, obs = generate_problem(5, 200, seed=3)
    grid_raw = np.linspace(obs.x.min(), obs.x.max(), 20)
    intv = sample_interventional(problem, grid_raw, 10, 4)
    obs_s, int_s, m = standardize(obs, intv)
    from dosegp.data import DoseGrid
    grid = DoseGrid(m.x_forward(grid_raw))
    prior = build_dose_response_prior(fit_observational_model(obs_s, restarts=2, seed=0), obs_s, grid)
    empty = run_mcmc(prior, None, seed=1)
    full = run_mcmc(prior, int_s, seed=1)
    shift_obs = np.linalg.norm(full.f_obs.mean(axis=0) - empty.f_obs.mean(axis=0))
    shift_f = np.linalg.norm(full.f.mean(axis=0) - empty.f.mean(axis=0))
    assert shift_obs <= shift_f
