"""Pointwise affine reshaping of the observational prior.

Model on the dose grid::

    f_obs ~ N(mu_obs, K_obs)
    a     ~ N(1, K_a)          distortion
    b     ~ N(0, K_b)          translation
    f     = a * f_obs + b
    y_i   ~ N(f(x_i), sigma2)  interventional rows

``K_a`` and ``K_b`` share a squared-exponential shape on the 2-D points
``(x_hat, y_hat)`` with amplitude following ``sqrt(diag K_obs)``.
Inference is Gibbs sampling: the three latent vectors are drawn from
their Gaussian full conditionals, the noise variance from its
inverse-gamma conditional under the Jeffreys prior, and the four kernel
hyperparameters by slice sampling on the log scale.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .backdoor import DoseResponsePrior
from .data import InterventionalDataset
from .errors import InputError, NumericalError
from .gp import cholesky_jitter
from .rng import as_rng
from .slice import slice_sample

logger = logging.getLogger(__name__)

NUGGET = 1e-5
LOG_LAMBDA_PRIOR_VAR = 0.5
LOG_SIGMA_PRIOR_VAR = 0.1
_LOG2PI = np.log(2.0 * np.pi)

DEFAULT_ITERATIONS = 2200
DEFAULT_BURN_IN = 200
DEFAULT_THIN = 10
SLICE_WIDTH = 1.0
SLICE_MAX_STEPOUT = 50


@dataclass(frozen=True)
class AffineHyper:
    lambda_a: float = 1.0
    sigma_a: float = 1.0
    lambda_b: float = 1.0
    sigma_b: float = 1.0
    noise_variance: float = 1.0

    def __post_init__(self):
        for name in ("lambda_a", "sigma_a", "lambda_b", "sigma_b", "noise_variance"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InputError(f"{name} must be positive and finite, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.lambda_a, self.sigma_a, self.lambda_b, self.sigma_b, self.noise_variance])

    @classmethod
    def from_array(cls, v) -> "AffineHyper":
        return cls(*map(float, v))


HYPER_NAMES = ("lambda_a", "sigma_a", "lambda_b", "sigma_b", "noise_variance")


@dataclass(frozen=True)
class McmcState:
    f_obs: np.ndarray
    a: np.ndarray
    b: np.ndarray
    hyper: AffineHyper

    @property
    def f(self) -> np.ndarray:
        return self.a * self.f_obs + self.b


@dataclass(frozen=True)
class McmcSamples:
    """Retained draws, one row per kept iteration."""

    f_obs: np.ndarray
    a: np.ndarray
    b: np.ndarray
    hyper: np.ndarray
    seed: object
    burn_in: int
    thin: int
    iterations: int
    final_state: Optional[McmcState] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.f_obs.shape[0] < 1:
            raise InputError("no draws retained; check iterations/burn_in/thin")
        for name in ("f_obs", "a", "b", "hyper"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"non-finite values in retained {name} draws")

    @property
    def f(self) -> np.ndarray:
        return self.a * self.f_obs + self.b

    def __len__(self):
        return self.f_obs.shape[0]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "iterations": self.iterations,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "hyper_names": list(HYPER_NAMES),
            "f_obs": self.f_obs.tolist(),
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "hyper": self.hyper.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "McmcSamples":
        d = json.loads(Path(path).read_text())
        return cls(
            np.asarray(d["f_obs"], dtype=float),
            np.asarray(d["a"], dtype=float),
            np.asarray(d["b"], dtype=float),
            np.asarray(d["hyper"], dtype=float),
            d["seed"],
            d["burn_in"],
            d["thin"],
            d["iterations"],
        )


# ---------------------------------------------------------------------------
# Kernel geometry and hyperprior
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineGeometry:
    """Rescaled coordinates shared by ``K_a`` and ``K_b``."""

    x_hat: np.ndarray
    y_hat: np.ndarray
    v: np.ndarray

    @classmethod
    def from_prior(cls, prior: DoseResponsePrior) -> "AffineGeometry":
        x = prior.grid.levels
        span = x.max() - x.min()
        x_hat = (x - x.min()) / span if span > 0 else np.zeros_like(x)
        mu = prior.mean
        mspan = mu.max() - mu.min()
        # a flat observational curve carries no shape information
        y_hat = (mu - mu.min()) / mspan if mspan > 0 else np.zeros_like(mu)
        d = np.clip(np.diag(prior.cov), 0.0, None)
        v = np.sqrt(d / d.max()) if d.max() > 0 else np.ones_like(d)
        return cls(x_hat, y_hat, v)

    @property
    def sqdist(self) -> np.ndarray:
        dx = self.x_hat[:, None] - self.x_hat[None, :]
        dy = self.y_hat[:, None] - self.y_hat[None, :]
        return dx * dx + dy * dy

    def matrix(self, lam: float, sigma: float, sqdist: Optional[np.ndarray] = None) -> np.ndarray:
        D = self.sqdist if sqdist is None else sqdist
        K = lam * np.outer(self.v, self.v) * np.exp(-0.5 * D / sigma)
        K[np.diag_indices_from(K)] += NUGGET
        return K


def affine_kernel(x: float, x2: float, lam: float, sigma: float, prior: DoseResponsePrior) -> float:
    """Single entry of ``K_a`` (or ``K_b``) for two grid doses."""
    if not (lam > 0 and sigma > 0):
        raise InputError("lambda and sigma must be positive")
    idx = prior.grid.index_of([x, x2])
    geo = AffineGeometry.from_prior(prior)
    i, j = idx
    d2 = (geo.x_hat[i] - geo.x_hat[j]) ** 2 + (geo.y_hat[i] - geo.y_hat[j]) ** 2
    k = lam * geo.v[i] * geo.v[j] * np.exp(-0.5 * d2 / sigma)
    return float(k + (NUGGET if i == j else 0.0))


def _log_normal0(z: float, var: float) -> float:
    return -0.5 * (_LOG2PI + np.log(var) + z * z / var)


def log_hyperprior(hyper: AffineHyper) -> float:
    """Log density of the hyperparameters, with the log-normal terms taken
    as densities of the log-parameters and the Jeffreys term ``-log sigma2``."""
    return (
        _log_normal0(np.log(hyper.lambda_a), LOG_LAMBDA_PRIOR_VAR)
        + _log_normal0(np.log(hyper.sigma_a), LOG_SIGMA_PRIOR_VAR)
        + _log_normal0(np.log(hyper.lambda_b), LOG_LAMBDA_PRIOR_VAR)
        + _log_normal0(np.log(hyper.sigma_b), LOG_SIGMA_PRIOR_VAR)
        - np.log(hyper.noise_variance)
    )


# ---------------------------------------------------------------------------
# Gibbs sampler
# ---------------------------------------------------------------------------


def _chol(A: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return cholesky_jitter(A, what)[0]


def _mvn_logpdf_chol(r: np.ndarray, L: np.ndarray) -> float:
    w = np.linalg.solve(L, r) if r.size > 1 else r / L[0, 0]
    return float(-0.5 * (w @ w) - np.log(np.diag(L)).sum() - 0.5 * r.size * _LOG2PI)


def _conditional_draw(mean, K, L, s, u, rng):
    """Draw g | u for g ~ N(mean, K), u = s * g + e, e ~ N(0, I).

    Perturb-and-condition: a prior draw is corrected with the Kalman gain,
    which needs only the well-conditioned ``I + S K S`` factor.
    """
    T = mean.size
    g0 = mean + L @ rng.standard_normal(T)
    if not np.any(s):
        return g0
    e0 = rng.standard_normal(T)
    B = s[:, None] * K * s[None, :]
    B[np.diag_indices_from(B)] += 1.0
    Lb = _chol(B, "conditional system")
    r = u - s * g0 - e0
    sol = np.linalg.solve(Lb.T, np.linalg.solve(Lb, r))
    return g0 + K @ (s * sol)


class GibbsSampler:
    """Precomputed context for repeated sweeps over one dataset.

    ``clamp_a``/``clamp_b`` hold ``a = 1``/``b = 0`` fixed (nested
    competitors). ``update_hyper`` and ``update_noise`` switch the slice and
    inverse-gamma steps on or off. The noise step is skipped automatically
    when there is no interventional data since its conditional is improper.
    """

    def __init__(
        self,
        prior: DoseResponsePrior,
        int_data: Optional[InterventionalDataset] = None,
        clamp_a: bool = False,
        clamp_b: bool = False,
        update_hyper: bool = True,
        update_noise: bool = True,
        slice_width: float = SLICE_WIDTH,
        max_stepout: int = SLICE_MAX_STEPOUT,
    ):
        self.prior = prior
        self.T = prior.size
        if int_data is None:
            int_data = InterventionalDataset.empty()
        self.idx = prior.grid.index_of(int_data.x)
        self.y = int_data.y.copy()
        self.M = self.y.size
        self.counts = np.bincount(self.idx, minlength=self.T).astype(float)
        sums = np.bincount(self.idx, weights=self.y, minlength=self.T)
        self.ybar = np.divide(sums, self.counts, out=np.zeros(self.T), where=self.counts > 0)
        self.sqrt_n = np.sqrt(self.counts)

        self.K_obs = prior.cov.copy()
        self.L_obs, jitter = cholesky_jitter(self.K_obs, "observational prior covariance")
        self.K_obs[np.diag_indices_from(self.K_obs)] += jitter

        self.geometry = AffineGeometry.from_prior(prior)
        self._sqdist = self.geometry.sqdist
        self.clamp_a = clamp_a
        self.clamp_b = clamp_b
        self.update_hyper = update_hyper
        self.update_noise = update_noise and self.M > 0
        self.slice_width = slice_width
        self.max_stepout = max_stepout
        self._cache: dict = {}

    # -- helpers ---------------------------------------------------------
    def kernel(self, lam: float, sigma: float):
        key = (lam, sigma)
        hit = self._cache.get(key)
        if hit is None:
            K = self.geometry.matrix(lam, sigma, self._sqdist)
            hit = (K, _chol(K, "affine kernel"))
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def initial_state(self, hyper: Optional[AffineHyper] = None) -> McmcState:
        if hyper is None:
            if self.M > 0:
                resid = self.y - self.prior.mean[self.idx]
                noise = max(float(np.mean(resid**2)), 1e-6)
            else:
                noise = 1.0
            hyper = AffineHyper(noise_variance=noise)
        T = self.T
        return McmcState(self.prior.mean.copy(), np.ones(T), np.zeros(T), hyper)

    def simulate_data(self, state: McmcState, rng) -> np.ndarray:
        """Fresh interventional outcomes at the stored doses given latents."""
        return state.f[self.idx] + np.sqrt(state.hyper.noise_variance) * rng.standard_normal(self.M)

    def set_outcomes(self, y: np.ndarray) -> None:
        self.y = np.asarray(y, dtype=float).copy()
        sums = np.bincount(self.idx, weights=self.y, minlength=self.T)
        self.ybar = np.divide(sums, self.counts, out=np.zeros(self.T), where=self.counts > 0)

    # -- one sweep -------------------------------------------------------
    def sweep(self, state: McmcState, rng) -> McmcState:
        h = state.hyper
        f_obs, a, b = state.f_obs, state.a, state.b
        scale = self.sqrt_n / np.sqrt(h.noise_variance)

        # (i) f_obs | a, b, data
        f_obs = _conditional_draw(self.prior.mean, self.K_obs, self.L_obs, scale * a,
                                  scale * (self.ybar - b), rng)
        # (ii) a | f_obs, b
        if not self.clamp_a:
            Ka, La = self.kernel(h.lambda_a, h.sigma_a)
            a = _conditional_draw(np.ones(self.T), Ka, La, scale * f_obs,
                                  scale * (self.ybar - b), rng)
        # (iii) b | f_obs, a
        if not self.clamp_b:
            Kb, Lb = self.kernel(h.lambda_b, h.sigma_b)
            b = _conditional_draw(np.zeros(self.T), Kb, Lb, scale,
                                  scale * (self.ybar - a * f_obs), rng)
        # (iv) sigma2 | rest: Jeffreys prior gives InvGamma(M/2, SS/2)
        noise = self.draw_noise(a * f_obs + b, rng) if self.update_noise else h.noise_variance
        # (v) kernel hyperparameters on the log scale
        la, sa, lb, sb = h.lambda_a, h.sigma_a, h.lambda_b, h.sigma_b
        if self.update_hyper:
            if not self.clamp_a:
                la, sa = self._slice_pair(a, 1.0, la, sa, rng)
            if not self.clamp_b:
                lb, sb = self._slice_pair(b, 0.0, lb, sb, rng)
        return McmcState(f_obs, a, b, AffineHyper(la, sa, lb, sb, noise))

    def draw_noise(self, f: np.ndarray, rng) -> float:
        """Conjugate draw of the trial noise variance given ``f`` on the grid."""
        ss = float(np.sum((self.y - f[self.idx]) ** 2))
        return 0.5 * ss / rng.gamma(0.5 * self.M)

    def _slice_pair(self, target, centre, lam, sig, rng):
        log_lam, log_sig = np.log(lam), np.log(sig)

        def lp_lam(t):
            K, L = self.kernel(np.exp(t), np.exp(log_sig))
            return _mvn_logpdf_chol(target - centre, L) + _log_normal0(t, LOG_LAMBDA_PRIOR_VAR)

        log_lam = slice_sample(lp_lam, log_lam, self.slice_width, self.max_stepout, rng)

        def lp_sig(t):
            K, L = self.kernel(np.exp(log_lam), np.exp(t))
            return _mvn_logpdf_chol(target - centre, L) + _log_normal0(t, LOG_SIGMA_PRIOR_VAR)

        log_sig = slice_sample(lp_sig, log_sig, self.slice_width, self.max_stepout, rng)
        return float(np.exp(log_lam)), float(np.exp(log_sig))


def gibbs_sweep(
    state: McmcState,
    prior: DoseResponsePrior,
    int_data: Optional[InterventionalDataset],
    rng,
    **options,
) -> McmcState:
    """One full Gibbs sweep; see :class:`GibbsSampler` for ``options``."""
    return GibbsSampler(prior, int_data, **options).sweep(state, as_rng(rng))


def run_mcmc(
    prior: DoseResponsePrior,
    int_data: Optional[InterventionalDataset],
    iterations: int = DEFAULT_ITERATIONS,
    burn_in: int = DEFAULT_BURN_IN,
    thin: int = DEFAULT_THIN,
    seed=0,
    init: Optional[McmcState] = None,
    **options,
) -> McmcSamples:
    """Run a single chain and keep every ``thin``-th draw after burn-in."""
    if iterations < 1 or burn_in < 0 or thin < 1:
        raise InputError("need iterations >= 1, burn_in >= 0, thin >= 1")
    if burn_in >= iterations:
        raise InputError(f"burn_in={burn_in} leaves no draws out of {iterations}")
    rng = as_rng(seed)
    sampler = GibbsSampler(prior, int_data, **options)
    state = init if init is not None else sampler.initial_state()
    if options.get("clamp_a"):
        state = replace(state, a=np.ones(sampler.T))
    if options.get("clamp_b"):
        state = replace(state, b=np.zeros(sampler.T))
    keep = []
    for it in range(iterations):
        try:
            state = sampler.sweep(state, rng)
        except NumericalError as exc:
            raise NumericalError(f"Gibbs sweep failed at iteration {it}: {exc}", iteration=it) from exc
        if it >= burn_in and (it - burn_in) % thin == 0:
            keep.append(state)
    seed_repr = seed if isinstance(seed, (int, type(None))) else repr(seed)
    return McmcSamples(
        np.array([s.f_obs for s in keep]),
        np.array([s.a for s in keep]),
        np.array([s.b for s in keep]),
        np.array([s.hyper.as_array() for s in keep]),
        seed_repr,
        burn_in,
        thin,
        iterations,
        final_state=state,
    )


def posterior_summary(samples: McmcSamples):
    """Per-dose sample mean and unbiased sample variance of ``f``."""
    if len(samples) < 2:
        raise InputError("posterior_summary needs at least 2 retained draws")
    f = samples.f
    return f.mean(axis=0), f.var(axis=0, ddof=1)


def write_summary_csv(path, doses, mean, var) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dose", "mean", "variance"])
        for row in zip(doses, mean, var):
            w.writerow([repr(float(v)) for v in row])
