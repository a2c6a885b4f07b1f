"""Dose-response estimation from observational and interventional data."""

from .affine import McmcSamples, posterior_summary, run_mcmc
from .backdoor import DoseResponsePrior, build_dose_response_prior, fit_observational_model
from .data import DoseGrid, InterventionalDataset, ObservationalDataset, standardize
from .errors import (DoseGPError, FittingError, GenerationError, InputError, MetricError,
                     NumericalError, ResourceError)

__version__ = "0.1.0"

__all__ = [
    "DoseGrid", "DoseResponsePrior", "DoseGPError", "FittingError", "GenerationError", "InputError",
    "InterventionalDataset", "McmcSamples", "MetricError", "NumericalError", "ObservationalDataset",
    "ResourceError", "build_dose_response_prior", "fit_observational_model", "posterior_summary",
    "run_mcmc", "standardize",
]
