"""Deterministic float64 autodiff, AdamW and the kernels they run on."""

from . import kernels
from .checkpoint import load_arrays, save_arrays
from .gradcheck import GradCheckResult, NonDeterministicError, finite_difference_check
from .module import Module, ParamSet, matches, parameter
from .optim import OptimState, Schedule, optimizer_step
from .rng import SplitMix, derive_seed
from .tensor import NumericalError, Tape, Tensor, forward_backward, no_grad

__all__ = [
    "GradCheckResult", "Module", "NonDeterministicError", "NumericalError", "OptimState",
    "ParamSet", "Schedule", "SplitMix", "Tape", "Tensor", "derive_seed",
    "finite_difference_check", "forward_backward", "kernels", "load_arrays", "matches",
    "no_grad", "optimizer_step", "parameter", "save_arrays",
]
