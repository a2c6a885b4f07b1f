"""Zero-mean Gaussian-process regression with ARD kernels.

Two stationary families are supported: Matérn-3/2 (used for the
observational outcome model) and squared-exponential (used by the
generic competitors). Hyperparameters live in log-space throughout:
``theta = [log l_1, ..., log l_d, log signal_variance, log noise_variance]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .errors import FittingError, InputError, NumericalError
from .rng import as_rng

logger = logging.getLogger(__name__)

MATERN32 = "matern32"
SQEXP = "se"
FAMILIES = (MATERN32, SQEXP)

_SQRT3 = np.sqrt(3.0)
_LOG2PI = np.log(2.0 * np.pi)
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class KernelSpec:
    family: str
    lengthscales: np.ndarray
    signal_variance: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if ls.ndim != 1 or ls.size == 0:
            raise InputError("lengthscales must be a non-empty vector")
        if np.any(~(ls > 0)):
            raise InputError(f"lengthscales must be positive, got {ls}")
        if not self.signal_variance > 0:
            raise InputError(f"signal_variance must be positive, got {self.signal_variance}")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "lengthscales": self.lengthscales.tolist(),
            "signal_variance": self.signal_variance,
        }


def _as_inputs(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if dim == 1 else X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != dim:
        raise InputError(f"inputs have shape {X.shape}, kernel expects {dim} columns")
    return X


def scaled_sqdist(A: np.ndarray, B: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """Squared ARD-scaled Euclidean distances between rows of A and B."""
    a = A / lengthscales
    b = B / lengthscales
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def kernel_from_sqdist(family: str, signal_variance: float, r2: np.ndarray) -> np.ndarray:
    if family == MATERN32:
        r = _SQRT3 * np.sqrt(r2)
        return signal_variance * (1.0 + r) * np.exp(-r)
    return signal_variance * np.exp(-0.5 * r2)


def kernel_matrix(spec: KernelSpec, A, B=None) -> np.ndarray:
    A = _as_inputs(A, spec.dim)
    B = A if B is None else _as_inputs(B, spec.dim)
    K = kernel_from_sqdist(spec.family, spec.signal_variance, scaled_sqdist(A, B, spec.lengthscales))
    if B is A:
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, spec.signal_variance)
    return K


def kernel_eval(spec: KernelSpec, u, v) -> float:
    """Covariance between two single input points."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if u.shape != (spec.dim,) or v.shape != (spec.dim,):
        raise InputError(f"points of shape {u.shape} and {v.shape} for a {spec.dim}-d kernel")
    r2 = float(np.sum(((u - v) / spec.lengthscales) ** 2))
    return float(kernel_from_sqdist(spec.family, spec.signal_variance, np.array(r2)))


def cholesky_jitter(A: np.ndarray, what: str = "matrix"):
    """Lower Cholesky factor with escalating diagonal nugget.

    The nugget is relative to the mean diagonal and climbs 1e-10 .. 1e-6 by
    decades. Returns ``(L, jitter)`` where ``jitter`` is the absolute amount
    added.
    """
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    eye = np.eye(A.shape[0])
    for rel in JITTER_LADDER:
        try:
            return cholesky(A + rel * scale * eye, lower=True, check_finite=False), rel * scale
        except (LinAlgError, ValueError):
            continue
    try:
        min_eig = float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
    except (LinAlgError, ValueError):
        min_eig = float("nan")
    raise NumericalError(
        f"{what} is not positive definite after jitter escalation",
        size=A.shape[0],
        min_eigenvalue=min_eig,
        max_jitter=JITTER_LADDER[-1] * scale,
    )


@dataclass(frozen=True)
class GpPosterior:
    """A GP conditioned on training data, with its factorisation cached."""

    kernel: KernelSpec
    noise_variance: float
    X: np.ndarray
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0
    nll: float = float("nan")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "noise_variance": self.noise_variance,
            "n": self.n,
            "jitter": self.jitter,
            "nll": self.nll,
        }


def condition(spec: KernelSpec, noise_variance: float, X, y) -> GpPosterior:
    """Condition the GP prior on ``(X, y)`` with fixed hyperparameters."""
    X = _as_inputs(X, spec.dim)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise InputError(f"{X.shape[0]} input rows but {y.size} targets")
    if X.shape[0] < 1:
        raise InputError("need at least one training point")
    if not noise_variance > 0:
        raise InputError(f"noise_variance must be positive, got {noise_variance}")
    K = kernel_matrix(spec, X)
    K[np.diag_indices_from(K)] += noise_variance
    L, jitter = cholesky_jitter(K, "training covariance")
    alpha = cho_solve((L, True), y, check_finite=False)
    nll = 0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * y.size * _LOG2PI
    return GpPosterior(spec, float(noise_variance), X, y, L, alpha, jitter, float(nll))


def pack(spec: KernelSpec, noise_variance: float) -> np.ndarray:
    return np.r_[np.log(spec.lengthscales), np.log(spec.signal_variance), np.log(noise_variance)]


def unpack(theta: np.ndarray, family: str) -> tuple[KernelSpec, float]:
    theta = np.asarray(theta, dtype=float)
    return KernelSpec(family, np.exp(theta[:-2]), float(np.exp(theta[-2]))), float(np.exp(theta[-1]))


def _sym_weighted_sqdiff(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``sum_ij M_ij (X_ik - X_jk)^2`` for every column k of X (M symmetric)."""
    rows = M.sum(axis=1)
    return 2.0 * ((X * X).T @ rows) - 2.0 * np.einsum("ik,ik->k", X, M @ X)


def negative_log_marginal_likelihood(spec: KernelSpec, noise_variance: float, X, y):
    """NLL and its gradient with respect to the log-hyperparameters.

    Gradient order matches :func:`pack`.
    """
    X = _as_inputs(X, spec.dim)
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if n < 1:
        raise InputError("need at least one training point")
    if X.shape[0] != n:
        raise InputError(f"{X.shape[0]} input rows but {n} targets")
    if not noise_variance > 0:
        raise InputError(f"noise_variance must be positive, got {noise_variance}")

    r2 = scaled_sqdist(X, X, spec.lengthscales)
    np.fill_diagonal(r2, 0.0)
    Kf = kernel_from_sqdist(spec.family, spec.signal_variance, r2)
    Kf = 0.5 * (Kf + Kf.T)
    K = Kf.copy()
    K[np.diag_indices_from(K)] += noise_variance
    L, _ = cholesky_jitter(K, "training covariance")
    alpha = cho_solve((L, True), y, check_finite=False)
    value = 0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * _LOG2PI

    Kinv = cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    if spec.family == MATERN32:
        G = 3.0 * spec.signal_variance * np.exp(-_SQRT3 * np.sqrt(r2))
    else:
        G = Kf
    g_len = -0.5 * _sym_weighted_sqdiff(W * G, X) / spec.lengthscales**2
    g_sig = -0.5 * np.sum(W * Kf)
    g_noise = -0.5 * noise_variance * np.trace(W)
    return float(value), np.r_[g_len, g_sig, g_noise]


def _data_scales(X: np.ndarray, y: np.ndarray):
    x_scale = np.std(X, axis=0)
    x_scale = np.where(x_scale > 0, x_scale, 1.0)
    y_scale = float(np.var(y))
    if y_scale <= 0:
        y_scale = float(np.mean(y**2))
    if y_scale <= 0:
        y_scale = 1.0
    return x_scale, y_scale


def fit_hyperparameters(
    X,
    y,
    restarts: int = 5,
    seed=0,
    family: str = MATERN32,
    max_iter: int = 200,
) -> GpPosterior:
    """Type-II maximum likelihood with L-BFGS-B and random restarts.

    The first restart starts at the data scales (per-dimension input
    standard deviation, output variance, a tenth of it for noise); the rest
    multiply those scales by independent log-uniform factors in
    ``[1e-2, 1e2]``. The best local optimum wins.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise InputError(f"{X.shape[0]} input rows but {y.size} targets")
    if y.size < 2:
        raise InputError("hyperparameter fitting needs at least 2 points")
    if restarts < 1:
        raise InputError("restarts must be >= 1")
    rng = as_rng(seed)
    d = X.shape[1]
    x_scale, y_scale = _data_scales(X, y)

    base = np.r_[np.log(x_scale), np.log(y_scale), np.log(0.1 * y_scale)]
    lo = np.r_[np.log(1e-3 * x_scale), np.log(1e-6 * y_scale), np.log(1e-8 * y_scale)]
    hi = np.r_[np.log(1e4 * x_scale), np.log(1e4 * y_scale), np.log(10.0 * y_scale)]
    bounds = list(zip(lo, hi))
    starts = [base]
    for _ in range(restarts - 1):
        starts.append(np.clip(np.r_[np.log(x_scale), np.log(y_scale), np.log(y_scale)]
                              + rng.uniform(np.log(1e-2), np.log(1e2), size=d + 2), lo, hi))

    best_val, best_theta = np.inf, None
    for k, theta0 in enumerate(starts):
        seen = {"val": np.inf, "theta": None}

        def objective(theta):
            try:
                spec, noise = unpack(theta, family)
                val, grad = negative_log_marginal_likelihood(spec, noise, X, y)
            except NumericalError:
                return 1e300, np.zeros_like(theta)
            if not np.isfinite(val) or not np.all(np.isfinite(grad)):
                return 1e300, np.zeros_like(theta)
            if val < seen["val"]:
                seen["val"], seen["theta"] = val, theta.copy()
            return val, grad

        try:
            minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                     options={"maxiter": max_iter})
        except (ValueError, FloatingPointError) as exc:  # pragma: no cover - defensive
            logger.debug("restart %d raised %s", k, exc)
        if seen["theta"] is not None and seen["val"] < best_val:
            best_val, best_theta = seen["val"], seen["theta"]
    if best_theta is None:
        raise FittingError("marginal-likelihood optimisation failed on every restart",
                           restarts=restarts, n=y.size, dim=d)
    spec, noise = unpack(best_theta, family)
    return condition(spec, noise, X, y)


def predict_joint(model: GpPosterior, Xs, full_cov: bool = True):
    """Posterior mean and covariance of the latent function at ``Xs``.

    With ``full_cov=False`` the second return value is the vector of
    marginal variances.
    """
    Xs = _as_inputs(Xs, model.kernel.dim)
    Ks = kernel_matrix(model.kernel, model.X, Xs)
    mean = Ks.T @ model.alpha
    V = solve_triangular(model.chol, Ks, lower=True, check_finite=False)
    if not full_cov:
        var = model.kernel.signal_variance - np.einsum("ij,ij->j", V, V)
        return mean, np.maximum(var, 0.0)
    cov = kernel_matrix(model.kernel, Xs) - V.T @ V
    return mean, 0.5 * (cov + cov.T)
