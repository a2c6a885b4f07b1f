"""Dataset containers, dose grids, standardisation and CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class ObservationalDataset:
    """Rows ``(y, x, z_1..z_p)`` where the treatment arose naturally."""

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    z_names: tuple = ()
    strata: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float).ravel()
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(len(y), -1) if len(y) else z.reshape(0, 0)
        if not (len(y) == len(x) == z.shape[0]):
            raise InputError(f"row count mismatch: y={len(y)}, x={len(x)}, z={z.shape[0]}")
        names = tuple(self.z_names) or tuple(f"z{i + 1}" for i in range(z.shape[1]))
        if len(names) != z.shape[1]:
            raise InputError(f"{len(names)} covariate names for {z.shape[1]} columns")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "z_names", names)
        if self.strata is not None:
            s = np.asarray(self.strata).ravel()
            if len(s) != len(y):
                raise InputError("strata column length differs from data")
            object.__setattr__(self, "strata", s)

    def __len__(self):
        return len(self.y)

    @property
    def inputs(self) -> np.ndarray:
        """Regression design ``[x, z]`` of shape ``(N, 1 + p)``."""
        return np.column_stack([self.x, self.z])

    def subset(self, rows) -> "ObservationalDataset":
        strata = None if self.strata is None else self.strata[rows]
        return ObservationalDataset(self.y[rows], self.x[rows], self.z[rows], self.z_names, strata)

    def select_covariates(self, keep: Sequence[int]) -> "ObservationalDataset":
        keep = list(keep)
        return ObservationalDataset(
            self.y, self.x, self.z[:, keep], tuple(self.z_names[i] for i in keep), self.strata
        )


@dataclass(frozen=True)
class InterventionalDataset:
    """Rows ``(y, x)`` with ``x`` set externally on the dose grid."""

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float).ravel()
        if len(y) != len(x):
            raise InputError(f"row count mismatch: y={len(y)}, x={len(x)}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    def __len__(self):
        return len(self.y)

    @classmethod
    def empty(cls) -> "InterventionalDataset":
        return cls(np.empty(0), np.empty(0))

    def concat(self, other: "InterventionalDataset") -> "InterventionalDataset":
        return InterventionalDataset(np.r_[self.y, other.y], np.r_[self.x, other.x])


@dataclass(frozen=True)
class DoseGrid:
    """Strictly increasing treatment levels."""

    levels: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=float).ravel()
        if lv.size < 1:
            raise InputError("dose grid is empty")
        if lv.size > 1 and np.any(np.diff(lv) <= 0):
            raise InputError("dose grid must be strictly increasing")
        if not np.all(np.isfinite(lv)):
            raise InputError("dose grid has non-finite levels")
        object.__setattr__(self, "levels", lv)

    def __len__(self):
        return self.levels.size

    @classmethod
    def evenly_spaced(cls, lo: float, hi: float, size: int) -> "DoseGrid":
        if size < 2:
            raise InputError(f"a dose grid needs at least 2 levels, got {size}")
        if not hi > lo:
            raise InputError(f"empty dose range [{lo}, {hi}]")
        return cls(np.linspace(lo, hi, size))

    def index_of(self, doses, atol: float = 1e-9) -> np.ndarray:
        """Map doses to grid indices; off-grid doses raise."""
        doses = np.asarray(doses, dtype=float).ravel()
        if doses.size == 0:
            return np.empty(0, dtype=int)
        pos = np.searchsorted(self.levels, doses)
        lo = np.clip(pos - 1, 0, len(self) - 1)
        hi = np.clip(pos, 0, len(self) - 1)
        pick = np.where(np.abs(self.levels[lo] - doses) <= np.abs(self.levels[hi] - doses), lo, hi)
        scale = max(1.0, float(np.max(np.abs(self.levels))))
        off = np.abs(self.levels[pick] - doses) > atol * scale
        if np.any(off):
            raise InputError(f"doses not on grid: {doses[off][:5].tolist()}")
        return pick


@dataclass(frozen=True)
class Moments:
    """Observational location/scale used to standardise both regimes."""

    y_mean: float
    y_std: float
    x_mean: float
    x_std: float
    z_mean: np.ndarray = field(default_factory=lambda: np.empty(0))
    z_std: np.ndarray = field(default_factory=lambda: np.empty(0))

    def y_forward(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def y_inverse(self, y):
        return np.asarray(y, dtype=float) * self.y_std + self.y_mean

    def x_forward(self, x):
        return (np.asarray(x, dtype=float) - self.x_mean) / self.x_std

    def x_inverse(self, x):
        return np.asarray(x, dtype=float) * self.x_std + self.x_mean

    def var_inverse(self, v):
        return np.asarray(v, dtype=float) * self.y_std**2

    def to_dict(self) -> dict:
        return {
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "x_mean": self.x_mean,
            "x_std": self.x_std,
            "z_mean": np.asarray(self.z_mean).tolist(),
            "z_std": np.asarray(self.z_std).tolist(),
        }


def compute_moments(obs: ObservationalDataset) -> Moments:
    if len(obs) == 0:
        raise InputError("observational dataset is empty")
    y_std = float(np.std(obs.y))
    x_std = float(np.std(obs.x))
    if y_std == 0.0:
        raise InputError("observational outcome has zero variance")
    if x_std == 0.0:
        raise InputError("observational treatment has zero variance")
    z_std = np.std(obs.z, axis=0)
    # constant covariates are centred but left unscaled
    z_std = np.where(z_std > 0, z_std, 1.0)
    return Moments(
        float(np.mean(obs.y)), y_std, float(np.mean(obs.x)), x_std, np.mean(obs.z, axis=0), z_std
    )


def standardize(
    obs: ObservationalDataset,
    intv: Optional[InterventionalDataset] = None,
    moments: Optional[Moments] = None,
):
    """Standardise both regimes with the observational moments.

    Returns ``(obs_std, int_std, moments)``. ``int_std`` is ``None`` when no
    interventional data is passed. Supplying ``moments`` reuses them instead
    of recomputing from ``obs``.
    """
    m = moments if moments is not None else compute_moments(obs)
    z = (obs.z - m.z_mean) / m.z_std if obs.z.size else obs.z
    obs_s = ObservationalDataset(m.y_forward(obs.y), m.x_forward(obs.x), z, obs.z_names, obs.strata)
    int_s = None
    if intv is not None:
        int_s = InterventionalDataset(m.y_forward(intv.y), m.x_forward(intv.x))
    return obs_s, int_s, m


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def read_table(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if not rows:
        raise InputError(f"{path} is empty")
    return rows[0], rows[1:]


def _column(header, rows, name, path):
    if name not in header:
        raise InputError(f"column {name!r} not found in {path}; have {header}")
    j = header.index(name)
    return [r[j] for r in rows]


def read_observational_csv(
    path,
    outcome: str = "y",
    treatment: str = "x",
    covariates: Optional[Sequence[str]] = None,
    stratum: Optional[str] = None,
) -> ObservationalDataset:
    """Load an observational table; covariates default to every other column."""
    header, rows = read_table(path)
    if covariates is None:
        covariates = [c for c in header if c not in (outcome, treatment, stratum)]
    try:
        y = np.array(_column(header, rows, outcome, path), dtype=float)
        x = np.array(_column(header, rows, treatment, path), dtype=float)
        z = np.array(
            [np.array(_column(header, rows, c, path), dtype=float) for c in covariates]
        ).T.reshape(len(rows), len(covariates))
    except ValueError as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"non-numeric value in {path}: {exc}") from exc
    strata = None
    if stratum is not None:
        strata = np.array(_column(header, rows, stratum, path))
    return ObservationalDataset(y, x, z, tuple(covariates), strata)


def read_interventional_csv(path, outcome: str = "y", treatment: str = "x") -> InterventionalDataset:
    header, rows = read_table(path)
    try:
        y = np.array(_column(header, rows, outcome, path), dtype=float)
        x = np.array(_column(header, rows, treatment, path), dtype=float)
    except ValueError as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"non-numeric value in {path}: {exc}") from exc
    return InterventionalDataset(y, x)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, header: Sequence[str], rows, comments: Sequence[str] = ()) -> None:
    """Write a CSV; ``comments`` become leading ``#`` lines that readers skip."""
    with Path(path).open("w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_observational_csv(path, obs: ObservationalDataset, stratum_name: str = "stratum",
                            comments: Sequence[str] = ()) -> None:
    header = ["y", "x", *obs.z_names]
    cols = [obs.y, obs.x, *obs.z.T]
    if obs.strata is not None:
        header.append(stratum_name)
        cols.append(obs.strata)
    write_table(path, header, zip(*cols), comments)


def write_interventional_csv(path, data: InterventionalDataset, comments: Sequence[str] = ()) -> None:
    write_table(path, ["y", "x"], zip(data.y, data.x), comments)
