"""Simulation and numerical checks for a one-dimensional self-interacting diffusion."""

from .kernels import Kernel, KernelError, Variant, check_kernel_properties, eval_f, x_max
from .scaling import DomainError, ScalingConstants, a_sequence, compute_constants, sequence_report
from .occupation import DriftQuerySpec, OccupationMeasure, QueryMode
from .integrator import HittingRecord, PathAborted, PathState, SimConfig, gamma_plus_diagnostic, run_path, simulate, step

__all__ = [
    "Kernel", "KernelError", "Variant", "check_kernel_properties", "eval_f", "x_max",
    "DomainError", "ScalingConstants", "a_sequence", "compute_constants", "sequence_report",
    "DriftQuerySpec", "OccupationMeasure", "QueryMode",
    "HittingRecord", "PathAborted", "PathState", "SimConfig", "gamma_plus_diagnostic", "run_path", "simulate", "step",
]
