"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N [...]: PASS|FAIL`` line (also
repeated in the terminal summary) and then asserts the criterion at its
stated tolerance. Set ``DOSEGP_FULL_SCALE=1`` to also run the full-size
synthetic study (several hours).
"""

import json
import os
import time

import numpy as np
import pytest
from scipy import stats

from conftest import record_acceptance
from dosegp.active import run_active_loop
from dosegp.affine import NUGGET, AffineGeometry, AffineHyper, GibbsSampler, McmcState
from dosegp.backdoor import DoseResponsePrior, build_dose_response_prior
from dosegp.cli import main
from dosegp.data import DoseGrid, InterventionalDataset
from dosegp.evaluation import StudyConfig, run_study
from dosegp.gp import MATERN32, SQEXP, negative_log_marginal_likelihood, pack
from dosegp.semisynth import (fit_semisynthetic_truth, make_stratified_table, run_semisynthetic_study,
                              simulate_trial, summarize_semisynthetic)
from dosegp.slice import slice_sample
from dosegp.synth import generate_problem
from test_backdoor import dense_prior, random_setup
from test_gp import fd_gradient, random_problem

SEMI_GRID = DoseGrid(np.arange(0.0, 451.0, 25.0))


def batch_se(x, batches=50):
    """Batch-means standard error of the mean of each column."""
    means = np.array([b.mean(axis=0) for b in np.array_split(np.asarray(x), batches)])
    return means.std(axis=0, ddof=1) / np.sqrt(batches)


def test_c1_gradient_matches_finite_differences():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for k in range(50):
        spec, noise, X, y = random_problem(rng, MATERN32 if k % 2 == 0 else SQEXP)
        g = negative_log_marginal_likelihood(spec, noise, X, y)[1]
        fd = fd_gradient(spec, noise, X, y)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 10
    record_acceptance(1, "NLL gradient", ok, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_c2_blocked_prior_matches_dense():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        T = int(rng.integers(2, 11))
        N = int(rng.integers(2, 200 // T + 1))
        model, obs, grid = random_setup(rng, N, T, p=int(rng.integers(1, 4)))
        prior = build_dose_response_prior(model, obs, grid, block_size=int(rng.integers(1, 50)))
        mu, K = dense_prior(model, obs, grid)
        worst = max(worst, float(np.max(np.abs(prior.cov - K))), float(np.max(np.abs(prior.mean - mu))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 30
    record_acceptance(2, "blocked prior", ok, f"max abs diff {worst:.1e}, {elapsed:.1f}s")
    assert ok


def quadrature_moments(mu, K, var_a, var_b, noise, y, n=161, width=7.0):
    """Posterior mean and variance of f = a f_obs + b on a product grid."""
    def axis(centre, var):
        return np.linspace(centre - width * np.sqrt(var), centre + width * np.sqrt(var), n)

    F, A, B = np.meshgrid(axis(mu, K), axis(1.0, var_a), axis(0.0, var_b), indexing="ij")
    f = A * F + B
    logw = (-0.5 * (F - mu) ** 2 / K - 0.5 * (A - 1) ** 2 / var_a - 0.5 * B**2 / var_b
            - 0.5 * sum((yi - f) ** 2 for yi in y) / noise)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    m = float(np.sum(w * f))
    return m, float(np.sum(w * (f - m) ** 2))


def test_c3_single_dose_posterior_matches_quadrature():
    start = time.perf_counter()
    mu, K, lam_a, lam_b, noise = 0.5, 0.3, 0.5, 0.3, 0.5
    y = np.array([1.2, 0.8, 1.5])
    # with one dose the affine kernels reduce to lambda + nugget
    m_q, v_q = quadrature_moments(mu, K, lam_a + NUGGET, lam_b + NUGGET, noise, y)
    assert m_q == pytest.approx(1.02059, abs=1e-5) and v_q == pytest.approx(0.144945, abs=1e-6)

    prior = DoseResponsePrior(DoseGrid([0.0]), np.array([mu]), np.array([[K]]), {})
    sampler = GibbsSampler(prior, InterventionalDataset(y, np.zeros(3)), update_hyper=False, update_noise=False)
    state = sampler.initial_state(AffineHyper(lambda_a=lam_a, lambda_b=lam_b, noise_variance=noise))
    rng = np.random.default_rng(0)
    draws = np.empty(60_000)
    for i in range(draws.size):
        state = sampler.sweep(state, rng)
        draws[i] = state.f[0]
    draws = draws[1000:]
    m, v = draws.mean(), draws.var()
    se_m = batch_se(draws)
    se_v = batch_se((draws - m) ** 2)
    elapsed = time.perf_counter() - start
    ok = abs(m - m_q) < 3 * se_m and abs(v - v_q) < 3 * se_v and elapsed < 60
    record_acceptance(3, "T=1 posterior", ok, f"mean {m:.4f} vs {m_q:.4f} (se {se_m:.4f}), "
                                             f"var {v:.4f} vs {v_q:.4f} (se {se_v:.4f}), {elapsed:.1f}s")
    assert ok


def geweke_prior():
    T = 5
    x = np.linspace(0.0, 1.0, T)
    K = 0.5 * np.exp(-0.5 * (x[:, None] - x[None, :]) ** 2 / 0.1) * np.outer(1 + x, 1 + x) + 1e-6 * np.eye(T)
    return DoseResponsePrior(DoseGrid(x), np.array([0.0, 0.5, 0.3, -0.2, 0.1]), K, {})


def test_c4_sampler_calibration():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    # slice sampler on N(0, 1)
    x, lx = 0.0, 0.0
    draws = np.empty(100_000)
    for i in range(draws.size):
        x, lx = slice_sample(lambda v: -0.5 * v * v, x, rng=rng, current_logp=lx, return_logp=True)
        draws[i] = x
    p_slice = stats.kstest(draws, "norm").pvalue

    # conjugate noise draws against the inverse-gamma law
    prior = geweke_prior()
    xi = np.repeat(prior.grid.levels, 2)
    y = prior.mean[prior.grid.index_of(xi)] + 0.4 * rng.standard_normal(xi.size)
    sampler = GibbsSampler(prior, InterventionalDataset(y, xi))
    f = prior.mean + 0.1
    ss = float(np.sum((y - f[sampler.idx]) ** 2))
    noise = [sampler.draw_noise(f, rng) for _ in range(20_000)]
    p_ig = stats.kstest(noise, stats.invgamma(0.5 * xi.size, scale=0.5 * ss).cdf).pvalue

    # Geweke: marginal-conditional simulator vs successive-conditional chain,
    # noise variance held fixed because its Jeffreys prior is improper
    T, S, noise_var = prior.size, 40_000, 0.3
    geo = AffineGeometry.from_prior(prior)
    Lobs = np.linalg.cholesky(prior.cov)

    def forward():
        la, sa, lb, sb = np.exp(rng.normal(0, np.sqrt([0.5, 0.1, 0.5, 0.1])))
        f_obs = prior.mean + Lobs @ rng.standard_normal(T)
        a = 1 + np.linalg.cholesky(geo.matrix(la, sa)) @ rng.standard_normal(T)
        b = np.linalg.cholesky(geo.matrix(lb, sb)) @ rng.standard_normal(T)
        return f_obs, a, b, AffineHyper(la, sa, lb, sb, noise_var)

    def stat(f_obs, a, b, h):
        f = a * f_obs + b
        return np.r_[f, f**2, np.log([h.lambda_a, h.sigma_a, h.lambda_b, h.sigma_b])]

    marginal = np.array([stat(*forward()) for _ in range(S)])
    chain_sampler = GibbsSampler(prior, InterventionalDataset(np.zeros(xi.size), xi), update_noise=False)
    state = McmcState(*forward())
    chain_sampler.set_outcomes(chain_sampler.simulate_data(state, rng))
    successive = np.empty_like(marginal)
    for i in range(S):
        state = chain_sampler.sweep(state, rng)
        chain_sampler.set_outcomes(chain_sampler.simulate_data(state, rng))
        successive[i] = stat(state.f_obs, state.a, state.b, state.hyper)
    se = np.sqrt(marginal.var(axis=0) / S + batch_se(successive) ** 2)
    z = (marginal.mean(axis=0) - successive.mean(axis=0)) / se
    elapsed = time.perf_counter() - start
    ok = p_slice > 0.01 and p_ig > 0.01 and np.max(np.abs(z)) < 3 and elapsed < 300
    record_acceptance(4, "sampler calibration", ok, f"slice KS p={p_slice:.3f}, inv-gamma KS p={p_ig:.3f}, "
                                                   f"Geweke max|z|={np.max(np.abs(z)):.2f}, {elapsed:.0f}s")
    assert ok


def test_c5_generator_fidelity():
    start = time.perf_counter()
    violations, worst_z = [], 0.0
    rng = np.random.default_rng(5)
    for k in range(20):
        problem, _ = generate_problem(3 + k % 8, 200, degree=2 + k % 2, alpha=(0.25, 0.1)[k % 2], seed=k)
        violations += problem.check_invariants()
        Lz = np.linalg.cholesky(problem.sigma_z)
        f = np.concatenate([problem.f_yz_of(rng.standard_normal((250_000, problem.p)) @ Lz.T) for _ in range(4)])
        worst_z = max(worst_z, abs(f.mean() - problem.expected_fyz) / (f.std() / np.sqrt(f.size)))
    elapsed = time.perf_counter() - start
    ok = not violations and worst_z < 3 and elapsed < 120
    record_acceptance(5, "generator fidelity", ok, f"violations={violations}, max |z|={worst_z:.2f}, {elapsed:.0f}s")
    assert ok


def test_c6_desk_scale_trend():
    start = time.perf_counter()
    config = StudyConfig.desk(degree="Q", range_fraction=0.5, drop_mode="random", M=40, seed=0,
                              threads=os.cpu_count() or 1)
    result = run_study(config)
    summary = result.summary()
    gain = summary["E"]["III"]["value"]
    wins = summary["win_rate_E"]["III"]
    elapsed = time.perf_counter() - start
    ok = gain > 0 and wins >= 0.70 and elapsed < 3600
    record_acceptance(6, "desk Q50% Random", ok, f"mean(E_III - E_ours)={gain:.3f}, win rate {wins:.0%}, "
                                                f"failures={summary['failures']}, {elapsed:.0f}s")
    assert ok


@pytest.mark.skipif(os.environ.get("DOSEGP_FULL_SCALE") != "1", reason="set DOSEGP_FULL_SCALE=1 (hours)")
def test_c6_full_scale_levels():
    config = StudyConfig.full(degree="Q", range_fraction=0.5, drop_mode="random", M=40, seed=0,
                               threads=os.cpu_count() or 1)
    summary = run_study(config).summary()
    e_iv = summary["mean_E"]["IV"]
    gain = summary["E"]["III"]["value"]
    ok = abs(e_iv - 0.41) <= 0.08 and abs(gain - 0.11) <= 0.05
    record_acceptance(6, "full-scale Q50% Random", ok, f"E_IV={e_iv:.3f}, E_III - E_ours={gain:.3f}")
    assert ok


@pytest.fixture(scope="module")
def semisynthetic_truths():
    return fit_semisynthetic_truth(make_stratified_table(seed=0), SEMI_GRID, stratified=True, seed=0)


def test_c7_semisynthetic_direction(semisynthetic_truths):
    start = time.perf_counter()
    rows = run_semisynthetic_study(semisynthetic_truths, replicates=10, runs=20, seed=0)
    summary = summarize_semisynthetic(rows)
    rates = {s: v["win_rate"] for s, v in summary["strata"].items()}
    elapsed = time.perf_counter() - start
    ok = all(r >= 0.70 for r in rates.values()) and elapsed < 1800
    record_acceptance(7, "semi-synthetic", ok, f"win rate vs III per stratum {rates}, "
                                              f"pooled {summary['pooled']['win_rate']:.0%}, {elapsed:.0f}s")
    assert ok


def test_c8_active_endpoint_concentration(semisynthetic_truths):
    start = time.perf_counter()
    truths = semisynthetic_truths
    T = len(SEMI_GRID)
    priors = {label: t.prior() for label, t in truths.items()}

    def oracle(label, dose, rng):
        return simulate_trial(truths[label], [dose], 1, rng).y[0]

    result = run_active_loop(priors, oracle, 5 * T, seed=0)
    ends = sum(h["dose_index"] in (0, T - 1) for h in result.history)
    frac = ends / len(result.history)
    elapsed = time.perf_counter() - start
    ok = len(result.history) == 5 * T and frac >= 0.5 and elapsed < 1200
    record_acceptance(8, "active endpoints", ok, f"{ends}/{len(result.history)} at endpoints, "
                                                f"per stratum {result.counts()}, {elapsed:.0f}s")
    assert ok


SMALL = ["--set", "iterations=200", "--set", "burn_in=40", "--set", "thin=4", "--set", "gp_restarts=1"]
RERUNS = {
    "generate": ["--set", "N=120", "--set", "p=5", "--set", "drop=2"],
    "evaluate": ["--set", "N=80", "--set", "p=4", "--set", "drop=2", "--set", "replications=2", "--set", "M=10",
                 "--set", "T=5", *SMALL],
    "semisynth": ["--set", "grid_step=150", "--set", "runs=2", "--set", "replicates=2", *SMALL],
    "active": ["--set", "grid_step=150", "--set", "budget=4", "--set", "update_iterations=40",
               "--set", "update_burn_in=8", "--set", "update_thin=2", *SMALL],
}


def test_c9_rerun_from_manifest_is_bit_identical(tmp_path):
    mismatched = []
    runs = dict(RERUNS)
    gen = tmp_path / "generate-1"
    for command, extra in runs.items():
        first, second = tmp_path / f"{command}-1", tmp_path / f"{command}-2"
        assert main([command, "--seed", "13", "--out", str(first), *extra]) == 0
        assert main([command, "--config", str(first / "manifest.json"), "--out", str(second)]) == 0
        outputs = json.loads((first / "manifest.json").read_text())["outputs"]
        mismatched += [f"{command}/{n}" for n in outputs if (first / n).read_bytes() != (second / n).read_bytes()]
    first, second = tmp_path / "fit-1", tmp_path / "fit-2"
    fit_args = ["--set", f'observational="{gen / "observational.csv"}"',
                "--set", f'interventional="{gen / "interventional.csv"}"', "--set", f'grid="{gen / "grid.csv"}"']
    assert main(["fit", "--seed", "13", "--out", str(first), *fit_args, *SMALL]) == 0
    assert main(["fit", "--config", str(first / "manifest.json"), "--out", str(second)]) == 0
    outputs = json.loads((first / "manifest.json").read_text())["outputs"]
    mismatched += [f"fit/{n}" for n in outputs if (first / n).read_bytes() != (second / n).read_bytes()]
    ok = not mismatched
    record_acceptance(9, "determinism", ok, "all commands" if ok else f"differ: {mismatched}")
    assert ok
