"""Synthetic confounded worlds with an analytic dose-response.

Generative model (``p`` confounders, ``N`` rows)::

    Z     ~ N(0, Sigma_Z),  unit diagonal, 0.5 off-diagonal
    X     = sum_i f_xi(Z_i) + e_X,      f_xi ~ GP(0, exp(-(z - z')^2 / 4)) / sqrt(p)
    Z_y   = theta_0 + theta^T Z
    f_yz  = beta_2 Z_y^2 + beta_1 Z_y + beta_0
    Y     = f_yx(X) + f_yz + e_Y,       f_yx a degree-d polynomial in standardised X

so that ``E[Y | do(X = x)] = f_yx(x) + E[f_yz]`` with ``E[f_yz]`` available
in closed form.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .data import InterventionalDataset, ObservationalDataset
from .errors import GenerationError, InputError
from .gp import MATERN32, cholesky_jitter, condition, fit_hyperparameters, predict_joint
from .rng import as_rng

logger = logging.getLogger(__name__)

CONFOUNDER_CORRELATION = 0.5
FX_KERNEL_SCALE = 4.0
NOISE_FRACTION_RANGE = (0.2, 0.4)
COEF_MIN_ABS = 0.2
MIN_RANK_CORRELATION = 0.2
MAX_REJECTIONS = 100
ADVERSARIAL_FIT_ROWS = 300


@dataclass(frozen=True)
class SyntheticProblem:
    """Every parameter of a generated world plus its realised latents."""

    p: int
    n: int
    degree: int
    alpha: float
    seed: object
    sigma_z: np.ndarray
    fx_values: np.ndarray  # (N, p) realised f_xi(z_i), already divided by sqrt(p)
    noise_fraction_x: float
    v_fx: float
    sigma2_x: float
    theta: np.ndarray  # (p + 1,), intercept first
    beta: np.ndarray  # (3,), beta_0, beta_1, beta_2
    noise_fraction_y: float
    v_fyz: float
    sigma2_y: float
    signal_range: float  # R
    raw_range: float  # R'
    lam_raw: np.ndarray  # (d + 1,)
    lam: np.ndarray  # (d + 1,)
    m_hat: float
    v_hat: float
    expected_fyz: float
    f_yz: np.ndarray  # (N,)
    f_yze: np.ndarray  # (N,)
    rank_correlation: float
    rejections: int

    # -- ground truth ----------------------------------------------------
    def f_yx(self, x) -> np.ndarray:
        xh = (np.asarray(x, dtype=float) - self.m_hat) / np.sqrt(self.v_hat)
        return np.polynomial.polynomial.polyval(xh, self.lam)

    def f_yz_of(self, Z) -> np.ndarray:
        zy = self.theta[0] + np.asarray(Z) @ self.theta[1:]
        return self.beta[2] * zy**2 + self.beta[1] * zy + self.beta[0]

    def check_invariants(self) -> list[str]:
        """Names of violated generator constraints (empty when valid)."""
        bad = []
        p = self.p
        target = np.full((p, p), CONFOUNDER_CORRELATION)
        np.fill_diagonal(target, 1.0)
        if not np.allclose(self.sigma_z, target, atol=0, rtol=0):
            bad.append("sigma_z")
        if not np.all(np.abs(self.beta) > COEF_MIN_ABS):
            bad.append("beta")
        if not np.all(np.abs(self.lam_raw) > COEF_MIN_ABS):
            bad.append("lam_raw")
        lo, hi = NOISE_FRACTION_RANGE
        if not lo <= self.sigma2_x / self.v_fx <= hi:
            bad.append("noise_fraction_x")
        if not lo <= self.sigma2_y / self.v_fyz <= hi:
            bad.append("noise_fraction_y")
        if not abs(self.rank_correlation) >= MIN_RANK_CORRELATION:
            bad.append("rank_correlation")
        return bad

    # -- serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticProblem":
        kw = dict(d)
        for k in ("sigma_z", "fx_values", "theta", "beta", "lam_raw", "lam", "f_yz", "f_yze"):
            kw[k] = np.asarray(kw[k], dtype=float)
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SyntheticProblem":
        return cls.from_dict(json.loads(Path(path).read_text()))


def confounder_covariance(p: int) -> np.ndarray:
    S = np.full((p, p), CONFOUNDER_CORRELATION)
    np.fill_diagonal(S, 1.0)
    return S


def _truncated_normal(rng, size: int) -> np.ndarray:
    out = np.empty(size)
    for i in range(size):
        v = 0.0
        while abs(v) <= COEF_MIN_ABS:
            v = rng.standard_normal()
        out[i] = v
    return out


def _gp_draw(z: np.ndarray, rng) -> np.ndarray:
    K = np.exp(-((z[:, None] - z[None, :]) ** 2) / FX_KERNEL_SCALE)
    L, _ = cholesky_jitter(K, "f_x covariance")
    return L @ rng.standard_normal(z.size)


def expected_fyz(theta: np.ndarray, beta: np.ndarray, sigma_z: np.ndarray) -> float:
    """``E[f_yz(Z)]`` using ``E[Z_y] = theta_0``, ``Var Z_y = theta^T Sigma theta``."""
    t = theta[1:]
    second = theta[0] ** 2 + t @ sigma_z @ t
    return float(beta[2] * second + beta[1] * theta[0] + beta[0])


def generate_problem(p: int, n: int, degree: int = 2, alpha: float = 0.25, seed=0):
    """Draw a world and its observational sample.

    The whole model is redrawn until ``|spearman(X, f_yz)| >= 0.2``.
    Returns ``(problem, dataset)``.
    """
    if p < 1:
        raise InputError("need at least one confounder")
    if n < 10:
        raise InputError("need at least 10 observational rows")
    if degree not in (2, 3):
        raise InputError(f"degree must be 2 or 3, got {degree}")
    if not 0 < alpha < 0.5:
        raise InputError(f"alpha must lie in (0, 0.5), got {alpha}")
    rng = as_rng(seed)
    sigma_z = confounder_covariance(p)
    Lz = np.linalg.cholesky(sigma_z)
    lo, hi = NOISE_FRACTION_RANGE

    for rejections in range(MAX_REJECTIONS + 1):
        Z = rng.standard_normal((n, p)) @ Lz.T
        fx = np.column_stack([_gp_draw(Z[:, i], rng) for i in range(p)]) / np.sqrt(p)
        sx = fx.sum(axis=1)
        v_fx = float(np.var(sx))
        bx = float(rng.uniform(lo, hi))
        sigma2_x = bx * v_fx
        X = sx + np.sqrt(sigma2_x) * rng.standard_normal(n)

        theta = rng.normal(0.0, np.sqrt(1.0 / (p + 1)), size=p + 1)
        beta = _truncated_normal(rng, 3)
        zy = theta[0] + Z @ theta[1:]
        f_yz = beta[2] * zy**2 + beta[1] * zy + beta[0]
        v_fyz = float(np.var(f_yz))
        by = float(rng.uniform(lo, hi))
        sigma2_y = by * v_fyz
        f_yze = f_yz + np.sqrt(sigma2_y) * rng.standard_normal(n)

        q_lo, q_hi = np.quantile(f_yze, [alpha, 1.0 - alpha])
        R = float(q_hi - q_lo)
        m_hat = float(np.mean(X))
        v_hat = float(np.var(X))
        xh = (X - m_hat) / np.sqrt(v_hat)
        lam_raw = _truncated_normal(rng, degree + 1)
        raw = np.polynomial.polynomial.polyval(xh, lam_raw)
        R_raw = float(raw.max() - raw.min())
        lam = lam_raw * R / R_raw
        Y = np.polynomial.polynomial.polyval(xh, lam) + f_yze

        rho = float(spearmanr(X, f_yz)[0])
        if abs(rho) >= MIN_RANK_CORRELATION:
            break
        logger.debug("rejected world %d: rank correlation %.3f", rejections, rho)
    else:
        raise GenerationError(
            f"no world met |rank corr(X, f_yz)| >= {MIN_RANK_CORRELATION} in {MAX_REJECTIONS} rejections"
        )

    problem = SyntheticProblem(
        p=p, n=n, degree=degree, alpha=float(alpha),
        seed=seed if isinstance(seed, (int, type(None))) else repr(seed),
        sigma_z=sigma_z, fx_values=fx, noise_fraction_x=bx, v_fx=v_fx, sigma2_x=sigma2_x,
        theta=theta, beta=beta, noise_fraction_y=by, v_fyz=v_fyz, sigma2_y=sigma2_y,
        signal_range=R, raw_range=R_raw, lam_raw=lam_raw, lam=lam, m_hat=m_hat, v_hat=v_hat,
        expected_fyz=expected_fyz(theta, beta, sigma_z), f_yz=f_yz, f_yze=f_yze,
        rank_correlation=rho, rejections=rejections,
    )
    names = tuple(f"z{i + 1}" for i in range(p))
    return problem, ObservationalDataset(Y, X, Z, names)


def true_dose_response(problem: SyntheticProblem, x) -> np.ndarray:
    return problem.f_yx(x) + problem.expected_fyz


def sample_interventional(problem: SyntheticProblem, x, replicates: int, rng) -> InterventionalDataset:
    """``replicates`` fresh outcomes at each dose in ``x`` with X forced."""
    rng = as_rng(rng)
    doses = np.repeat(np.atleast_1d(np.asarray(x, dtype=float)), replicates)
    m = doses.size
    Z = rng.standard_normal((m, problem.p)) @ np.linalg.cholesky(problem.sigma_z).T
    y = problem.f_yx(doses) + problem.f_yz_of(Z) + np.sqrt(problem.sigma2_y) * rng.standard_normal(m)
    return InterventionalDataset(y, doses)


def confounding_scores(problem: SyntheticProblem, dataset: ObservationalDataset, seed=0) -> np.ndarray:
    """Remaining confounding after adjusting for each single covariate.

    Score ``i`` is ``|spearman(X, r_i)|`` where ``r_i`` is ``f_yze`` minus
    its univariate GP regression on ``z_i``. Hyperparameters are fitted on
    at most 300 rows and the fit is then conditioned on every row.
    """
    rng = as_rng(seed)
    target = problem.f_yze
    n = target.size
    scores = np.empty(problem.p)
    for i in range(problem.p):
        z = dataset.z[:, i:i + 1]
        rows = rng.choice(n, size=min(n, ADVERSARIAL_FIT_ROWS), replace=False)
        sub = fit_hyperparameters(z[rows], target[rows], restarts=1, seed=rng, family=MATERN32)
        full = condition(sub.kernel, sub.noise_variance, z, target)
        resid = target - predict_joint(full, z, full_cov=False)[0]
        scores[i] = abs(spearmanr(dataset.x, resid)[0])
    return scores


def drop_confounders(problem: SyntheticProblem, dataset: ObservationalDataset, mode: str, k: int, rng=0):
    """Hide ``k`` confounders. Returns ``(reduced_dataset, dropped_indices)``.

    ``mode`` is ``"random"`` (uniform subset) or ``"adversarial"`` (the
    ``k`` covariates that individually leave the least confounding).
    """
    p = dataset.z.shape[1]
    if not 0 <= k < p:
        raise InputError(f"can drop 0..{p - 1} confounders, asked for {k}")
    if k == 0:
        return dataset, np.empty(0, dtype=int)
    rng = as_rng(rng)
    mode = mode.lower()
    if mode == "random":
        dropped = np.sort(rng.choice(p, size=k, replace=False))
    elif mode in ("adversarial", "adv"):
        scores = confounding_scores(problem, dataset, seed=rng)
        dropped = np.sort(np.argsort(scores, kind="stable")[:k])
    else:
        raise InputError(f"unknown drop mode {mode!r}; expected 'random' or 'adversarial'")
    keep = [i for i in range(p) if i not in set(dropped.tolist())]
    return dataset.select_covariates(keep), dropped
