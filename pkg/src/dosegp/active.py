"""Sequential dose selection by maximum posterior variance."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .affine import McmcSamples, posterior_summary, run_mcmc
from .backdoor import DoseResponsePrior
from .data import InterventionalDataset
from .errors import DoseGPError, InputError
from .rng import as_rng, child_seed

logger = logging.getLogger(__name__)

REFRESH_EVERY = 5


class OracleError(DoseGPError):
    """The experiment oracle failed; ``history`` holds the completed steps."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def select_next_dose(variances) -> int:
    """Index of the largest variance; ties go to the lowest index."""
    v = np.asarray(variances, dtype=float)
    if v.ndim != 1 or v.size < 1:
        raise InputError("need a non-empty vector of variances")
    return int(np.argmax(v))


@dataclass
class ActiveState:
    data: dict
    budget: int
    variances: dict
    since_refresh: dict
    samples: dict = field(default_factory=dict)


@dataclass
class ActiveResult:
    samples: dict  # stratum -> McmcSamples
    data: dict  # stratum -> InterventionalDataset
    history: list  # one dict per adaptive query

    def counts(self) -> dict:
        out = {}
        for h in self.history:
            out[h["stratum"]] = out.get(h["stratum"], 0) + 1
        return out


def run_active_loop(
    priors,
    oracle: Callable,
    budget: int,
    seed=0,
    iterations: int = 2200,
    burn_in: int = 200,
    thin: int = 10,
    update_iterations: int = 600,
    update_burn_in: int = 100,
    update_thin: int = 5,
    refresh_every: int = REFRESH_EVERY,
) -> ActiveResult:
    """Seed one outcome per dose, then spend ``budget`` adaptive queries.

    ``priors`` is a single prior or a mapping ``stratum -> prior``; the
    budget is shared and each step queries the (stratum, dose) pair with the
    largest posterior variance of ``f``. ``oracle(stratum, dose, rng)``
    returns one outcome. Latents are re-sampled after every query; the
    kernel hyperparameters of a stratum only after every ``refresh_every``
    new points in it.
    """
    if budget < 0:
        raise InputError("budget must be non-negative")
    if isinstance(priors, DoseResponsePrior):
        priors = {None: priors}
    if not isinstance(priors, Mapping) or not priors:
        raise InputError("priors must be a prior or a non-empty mapping of them")
    labels = list(priors)
    oracle_rng = as_rng(child_seed(seed, 0))

    def query(label, dose):
        try:
            return float(oracle(label, dose, oracle_rng))
        except Exception as exc:  # noqa: BLE001 - any oracle failure aborts the loop
            raise OracleError(f"oracle failed for stratum {label!r} at dose {dose}: {exc}", history) from exc

    history: list = []
    state = ActiveState({}, budget, {}, {})
    for k, label in enumerate(labels):
        doses = priors[label].grid.levels
        ys = np.array([query(label, d) for d in doses])
        state.data[label] = InterventionalDataset(ys, doses.copy())
        state.samples[label] = run_mcmc(priors[label], state.data[label], iterations, burn_in, thin,
                                        seed=child_seed(seed, 1, k))
        state.variances[label] = posterior_summary(state.samples[label])[1]
        state.since_refresh[label] = 0

    for step in range(budget):
        best = max(((state.variances[lb][select_next_dose(state.variances[lb])], -k, lb)
                    for k, lb in enumerate(labels)))
        label = best[2]
        k = labels.index(label)
        j = select_next_dose(state.variances[label])
        dose = float(priors[label].grid.levels[j])
        y = query(label, dose)
        state.data[label] = state.data[label].concat(InterventionalDataset([y], [dose]))
        state.since_refresh[label] += 1
        refresh = state.since_refresh[label] >= refresh_every
        if refresh:
            state.since_refresh[label] = 0
        prev: McmcSamples = state.samples[label]
        state.samples[label] = run_mcmc(
            priors[label], state.data[label], update_iterations, update_burn_in, update_thin,
            seed=child_seed(seed, 2, step), init=prev.final_state, update_hyper=refresh,
        )
        state.variances[label] = posterior_summary(state.samples[label])[1]
        state.budget -= 1
        history.append({"step": step, "stratum": label, "dose_index": j, "dose": dose, "y": y,
                        "refresh": refresh})
    return ActiveResult(state.samples, state.data, history)
