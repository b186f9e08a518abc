"""Kernel-based reactive particle tracking for A + B -> 0."""

from .core import (ConcentrationTrace, ConfigError, DegenerateKernel, KernelSpec, KrptError,
                   SimConfig, ZeroDiffusion, damkohler, validate_config)
from .kernels import (InfeasibleMatchTime, colocation_probability, least_squares_width,
                      max_matching_time, variable_width, width_at_time)
from .moments import error_bound, solve_mean_concentration, well_mixed
from .engine import initialize, run_ensemble, run_realization
from .eulerian import fd_ensemble, fd_initialize, fd_solve, fd_step

__version__ = "0.1.0"
