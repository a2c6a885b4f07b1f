"""Simulated interventional ground truth built from an observational table.

A GP fitted to the observational data (per stratum when requested) is
taken as the true outcome model. The trial mean at dose ``x`` is the
back-door average of its posterior mean over the observed covariate rows,
and the trial noise variance is the grid-averaged spread of those
per-row means plus the fitted regression noise, so that
``Y | do(x) ~ N(f(x), sigma_f^2)``.

Each stratum is standardised with its own observational moments and all
quantities on a truth object are in those standardised units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import baselines
from .affine import DEFAULT_BURN_IN, DEFAULT_ITERATIONS, DEFAULT_THIN
from .backdoor import DoseResponsePrior, build_dose_response_prior, fit_observational_model
from .data import DoseGrid, InterventionalDataset, Moments, ObservationalDataset, standardize
from .errors import InputError
from .evaluation import avg_posterior_log_density, normalized_abs_error
from .gp import GpPosterior, predict_joint
from .rng import as_rng, child_seed

MIN_STRATUM_ROWS = 20
DOSE_MAX = 468.0


@dataclass(frozen=True)
class SemiSyntheticTruth:
    label: Optional[str]
    grid: DoseGrid  # standardised doses
    raw_grid: DoseGrid
    mean: np.ndarray  # f(x) on the grid
    noise_variance: float  # sigma_f^2
    model_noise: float  # sigma_g^2
    between_variance: np.ndarray  # per-dose empirical variance of g_hat over rows
    model: GpPosterior
    obs: ObservationalDataset  # standardised rows the model was fitted on
    moments: Moments

    def __post_init__(self):
        if not self.noise_variance > 0:
            raise InputError("trial noise variance must be positive")

    def prior(self) -> DoseResponsePrior:
        """Back-door prior built from the same fitted model and rows."""
        return build_dose_response_prior(self.model, self.obs, self.grid)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "grid": self.grid.levels.tolist(),
            "raw_grid": self.raw_grid.levels.tolist(),
            "mean": self.mean.tolist(),
            "noise_variance": self.noise_variance,
            "model_noise": self.model_noise,
            "between_variance": self.between_variance.tolist(),
            "moments": self.moments.to_dict(),
            "model": self.model.to_dict(),
        }


def truth_from_model(model: GpPosterior, obs: ObservationalDataset, grid: DoseGrid) -> tuple:
    """Back-door mean, per-dose between-row variance, and sigma_f^2."""
    N = len(obs)
    T = len(grid)
    pts = np.column_stack([np.repeat(grid.levels, N), np.tile(obs.z, (T, 1))])
    g_hat = predict_joint(model, pts, full_cov=False)[0].reshape(T, N)
    mean = g_hat.mean(axis=1)
    between = g_hat.var(axis=1)
    return mean, between, float(between.mean() + model.noise_variance)


def _fit_one(label, obs: ObservationalDataset, raw_grid: DoseGrid, restarts, seed) -> SemiSyntheticTruth:
    if len(obs) < MIN_STRATUM_ROWS:
        raise InputError(f"stratum {label!r} has {len(obs)} rows; need at least {MIN_STRATUM_ROWS}")
    obs_s, _, moments = standardize(obs)
    grid = DoseGrid(moments.x_forward(raw_grid.levels))
    model = fit_observational_model(obs_s, restarts=restarts, seed=seed)
    mean, between, noise = truth_from_model(model, obs_s, grid)
    return SemiSyntheticTruth(label, grid, raw_grid, mean, noise, model.noise_variance, between, model, obs_s, moments)


def fit_semisynthetic_truth(
    obs: ObservationalDataset,
    grid: DoseGrid,
    stratified: bool = False,
    restarts: int = 5,
    seed=0,
) -> dict:
    """Fit one truth per stratum (or a single one keyed ``None``).

    Strata come from ``obs.strata``; each is fitted independently with its
    own seed stream, so data in one stratum never affects another.
    """
    if len(obs) == 0:
        raise InputError("observational dataset is empty")
    if not stratified:
        return {None: _fit_one(None, obs, grid, restarts, child_seed(seed, 0))}
    if obs.strata is None:
        raise InputError("stratified fit requested but the dataset has no stratum column")
    labels = sorted(set(obs.strata.tolist()), key=str)
    out = {}
    for k, label in enumerate(labels):
        rows = np.flatnonzero(obs.strata == label)
        out[label] = _fit_one(label, obs.subset(rows), grid, restarts, child_seed(seed, k))
    return out


def simulate_trial(truth: SemiSyntheticTruth, x, replicates: int, rng) -> InterventionalDataset:
    """``replicates`` i.i.d. outcomes ``N(f(x), sigma_f^2)`` at each dose in ``x``."""
    rng = as_rng(rng)
    doses = np.repeat(np.atleast_1d(np.asarray(x, dtype=float)), replicates)
    idx = truth.grid.index_of(doses)
    y = truth.mean[idx] + np.sqrt(truth.noise_variance) * rng.standard_normal(doses.size)
    return InterventionalDataset(y, doses)


def save_truths(path, truths: dict) -> None:
    Path(path).write_text(json.dumps({str(k): t.to_dict() for k, t in truths.items()}, indent=1))


def make_stratified_table(rows=(243, 104), seed=0, dose_max: float = DOSE_MAX) -> ObservationalDataset:
    """A confounded observational table with one independent world per stratum.

    Covariates are three correlated Gaussians and three binary indicators.
    The dose (in days, clipped to ``[0, dose_max]``) depends on four of them
    plus independent noise of comparable size, and the outcome adds a smooth
    stratum-specific dose effect to a nonlinear covariate effect.
    Strata are labelled ``s0, s1, ...``.
    """
    ys, xs, zs, labels = [], [], [], []
    corr = 0.3 + 0.7 * np.eye(3)
    for k, n in enumerate(rows):
        rng = as_rng(child_seed(seed, k))
        zc = rng.multivariate_normal(np.zeros(3), corr, size=n)
        zb = (rng.random((n, 3)) < 0.5).astype(float)
        w = rng.normal(0.0, 0.5, size=4)
        drive = zc[:, 0] * w[0] + zc[:, 1] * w[1] + zb[:, 0] * w[2] + zb[:, 1] * w[3]
        drive = (drive - drive.mean()) / max(drive.std(), 1e-12)
        dose = np.clip(dose_max / 2 + dose_max / 6 * (drive + rng.standard_normal(n)), 0.0, dose_max)
        u = dose / dose_max
        c = rng.normal(0.0, 1.0, size=3)
        effect = c[0] * u + c[1] * u**2 + c[2] * np.sin(np.pi * u)
        effect *= 1.5 / max(np.ptp(effect), 1e-12)
        gz = 0.5 * zc[:, 0] - 0.4 * zc[:, 1] + 0.3 * zc[:, 2] ** 2 + 0.4 * zb[:, 0] - 0.3 * zb[:, 1] * zc[:, 0]
        ys.append(effect + gz + 0.4 * rng.standard_normal(n))
        xs.append(dose)
        zs.append(np.column_stack([zc, zb]))
        labels += [f"s{k}"] * n
    z_names = ("c1", "c2", "c3", "b1", "b2", "b3")
    return ObservationalDataset(np.concatenate(ys), np.concatenate(xs), np.vstack(zs), z_names,
                                np.array(labels))


def run_semisynthetic_study(
    truths: dict,
    replicates: int = 10,
    runs: int = 20,
    seed=0,
    iterations: int = DEFAULT_ITERATIONS,
    burn_in: int = DEFAULT_BURN_IN,
    thin: int = DEFAULT_THIN,
    gp_restarts: int = 5,
) -> list:
    """Score the affine model against the interventional-only GP.

    Each run draws ``replicates`` trial outcomes per dose in every stratum.
    Returns rows ``{run, stratum, method, E, L}`` in standardised units.
    """
    priors = {label: t.prior() for label, t in truths.items()}
    out = []
    for run in range(runs):
        for k, (label, truth) in enumerate(truths.items()):
            trial = simulate_trial(truth, truth.grid.levels, replicates, child_seed(seed, run, k, 0))
            fits = [
                baselines.fit_affine_model(priors[label], trial, iterations, burn_in, thin,
                                           seed=child_seed(seed, run, k, 1)),
                baselines.fit_gp_direct(trial.x, trial.y, truth.grid, restarts=gp_restarts,
                                        seed=child_seed(seed, run, k, 2)),
            ]
            for fit in fits:
                out.append({"run": run, "stratum": label, "method": fit.method,
                            "E": normalized_abs_error(fit.mean, truth.mean),
                            "L": avg_posterior_log_density(fit.mean, fit.variance, truth.mean)})
    return out


def summarize_semisynthetic(rows: list) -> dict:
    """Per-stratum and pooled win rates of the affine model over III on E.

    The pooled entry compares the two methods' errors averaged across
    strata within each run.
    """
    table = {(r["run"], r["stratum"], r["method"]): r["E"] for r in rows}
    runs = sorted({r["run"] for r in rows})
    strata = list(dict.fromkeys(r["stratum"] for r in rows))
    summary = {"runs": len(runs), "strata": {}}
    for s in strata:
        ours = np.array([table[(r, s, "ours")] for r in runs])
        other = np.array([table[(r, s, "III")] for r in runs])
        summary["strata"][str(s)] = {"improvement": float(np.mean(other - ours)),
                                     "win_rate": float(np.mean(ours < other))}
    ours = np.array([np.mean([table[(r, s, "ours")] for s in strata]) for r in runs])
    other = np.array([np.mean([table[(r, s, "III")] for s in strata]) for r in runs])
    summary["pooled"] = {"improvement": float(np.mean(other - ours)), "win_rate": float(np.mean(ours < other))}
    return summary
