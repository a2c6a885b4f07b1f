"""Non-stationary dose-response prior from an observational outcome model.

Given a GP posterior over ``g(x, z) = E[Y | x, z]``, the adjusted curve
``f_obs(x_t) = mean_i g(x_t, z_i)`` is a linear map of the joint
predictive of ``g`` on the ``T x N`` product set, hence Gaussian. Its
covariance is assembled exactly without materialising the ``TN x TN``
predictive covariance:

    K_obs = P - W^T W,
    P[t, u] = mean_ij k((x_t, z_i), (x_u, z_j)),
    W[:, t] = mean_i  L^{-1} k(X_train, (x_t, z_i)).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .data import DoseGrid, ObservationalDataset
from .errors import InputError, ResourceError
from .gp import MATERN32, GpPosterior, fit_hyperparameters, kernel_from_sqdist, kernel_matrix, scaled_sqdist

DEFAULT_BLOCK_SIZE = 256
DEFAULT_MEMORY_BUDGET = 1 << 30


@dataclass(frozen=True)
class DoseResponsePrior:
    """Gaussian prior ``N(mean, cov)`` over the curve on ``grid``."""

    grid: DoseGrid
    mean: np.ndarray
    cov: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.asarray(self.cov, dtype=float)
        T = len(self.grid)
        if mean.shape != (T,) or cov.shape != (T, T):
            raise InputError(f"prior shapes {mean.shape}, {cov.shape} do not match grid of size {T}")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise InputError("prior mean/covariance must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def size(self) -> int:
        return len(self.grid)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.levels.tolist(),
            "mean": self.mean.tolist(),
            "cov": self.cov.ravel().tolist(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DoseResponsePrior":
        grid = DoseGrid(np.asarray(d["grid"], dtype=float))
        T = len(grid)
        return cls(grid, np.asarray(d["mean"]), np.asarray(d["cov"]).reshape(T, T), d.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DoseResponsePrior":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_observational_model(obs: ObservationalDataset, restarts: int = 5, seed=0) -> GpPosterior:
    """Matérn-3/2 ARD regression of ``y`` on ``[x, z]``."""
    return fit_hyperparameters(obs.inputs, obs.y, restarts=restarts, seed=seed, family=MATERN32)


def _estimate_bytes(n: int, N: int, T: int, block: int) -> int:
    # Ks and V (n x B), distance block and two temporaries (B x N), W (n x T)
    return 8 * (2 * n * block + 3 * block * N + n * T + T * T)


def build_dose_response_prior(
    model: GpPosterior,
    obs: ObservationalDataset,
    grid: DoseGrid,
    block_size: int = DEFAULT_BLOCK_SIZE,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> DoseResponsePrior:
    """Average the joint predictive of ``g`` over the empirical confounders.

    Work proceeds in blocks of ``block_size`` columns of the ``T x N``
    prediction set; peak memory is ``O((n + N) * block_size)``. Blocks are
    reduced in a fixed order so the result is bit-stable.
    """
    Z = obs.z
    N, p = Z.shape
    if N < 1:
        raise InputError("observational dataset is empty")
    if model.kernel.dim != 1 + p:
        raise InputError(f"model has {model.kernel.dim} inputs, data has 1 + {p}")
    if block_size < 1:
        raise InputError("block_size must be positive")
    levels = grid.levels
    T = levels.size
    n = model.n
    need = _estimate_bytes(n, N, T, block_size)
    if need > memory_budget:
        raise ResourceError(
            f"prior construction needs ~{need / 2**20:.0f} MiB with block_size={block_size}, "
            f"budget is {memory_budget / 2**20:.0f} MiB; use a smaller block_size"
        )

    spec = model.kernel
    ell = spec.lengthscales

    # posterior part: W (n x T) and the mean, over TN columns ordered (t, i)
    W = np.zeros((n, T))
    mean = np.zeros(T)
    total = T * N
    for start in range(0, total, block_size):
        cols = np.arange(start, min(start + block_size, total))
        t_idx, i_idx = np.divmod(cols, N)
        pts = np.column_stack([levels[t_idx], Z[i_idx]])
        Ks = kernel_matrix(spec, model.X, pts)
        V = solve_triangular(model.chol, Ks, lower=True, check_finite=False)
        mu = Ks.T @ model.alpha
        for t in np.unique(t_idx):
            sel = t_idx == t
            W[:, t] += V[:, sel].sum(axis=1)
            mean[t] += mu[sel].sum()
    W /= N
    mean /= N

    # prior part: P[t, u] = mean_ij k, blocked over confounder rows
    dx2 = ((levels[:, None] - levels[None, :]) / ell[0]) ** 2
    P = np.zeros((T, T))
    zl = ell[1:]
    for start in range(0, N, block_size):
        rows = slice(start, min(start + block_size, N))
        if p:
            Dz = scaled_sqdist(Z[rows], Z, zl)
        else:
            Dz = np.zeros((rows.stop - rows.start, N))
        for t in range(T):
            for u in range(t, T):
                P[t, u] += kernel_from_sqdist(spec.family, spec.signal_variance, Dz + dx2[t, u]).sum()
    P /= float(N) * float(N)
    P = np.triu(P) + np.triu(P, 1).T

    K_obs = P - W.T @ W
    provenance = {
        "N": int(N),
        "T": int(T),
        "block_size": int(block_size),
        "kernel": spec.to_dict(),
        "noise_variance": model.noise_variance,
    }
    return DoseResponsePrior(grid, mean, K_obs, provenance)
