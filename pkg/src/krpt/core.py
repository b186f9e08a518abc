"""Shared domain types, configuration validation and dimensionless groups."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np


class KrptError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(KrptError, ValueError):
    """A configuration violates one or more invariants.

    ``violations`` holds the names of every failed check, so callers can
    report all problems at once rather than one per run.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration: " + ", ".join(self.violations))


class ZeroDiffusion(KrptError, ValueError):
    pass


class DegenerateKernel(KrptError, ValueError):
    pass


DIRAC = "dirac"
FIXED = "fixed"
VARIABLE = "variable"
_VARIANTS = (DIRAC, FIXED, VARIABLE)


@dataclass(frozen=True)
class SimConfig:
    """Physical and numerical parameters of one experiment.

    Units are whatever the caller uses consistently; nothing is converted.
    """

    diffusion: float = 1.0e-5
    rate: float = 5.0
    c0: float = 1.0
    omega: float = 1.0
    dim: int = 1
    n_delta: int = 1000
    n_g: int = 100
    dt: float = 0.1
    t_final: float = 1000.0
    seed: int = 20180101
    n_realizations: int = 6

    # derived quantities; filled by validate_config
    m_delta: float = field(default=float("nan"), compare=False, repr=False)
    m_g: float = field(default=float("nan"), compare=False, repr=False)
    dx_delta: float = field(default=float("nan"), compare=False, repr=False)
    dx_g: float = field(default=float("nan"), compare=False, repr=False)

    @property
    def side(self) -> float:
        """Edge length of the (hyper-cubic) periodic domain."""
        return self.omega ** (1.0 / self.dim)

    def particle_mass(self, n_p: int) -> float:
        return self.c0 * self.omega / n_p

    def replace(self, **changes) -> "SimConfig":
        return validate_config(dataclasses.replace(self, **changes))

    def as_dict(self) -> dict:
        names = ("diffusion", "rate", "c0", "omega", "dim", "n_delta", "n_g",
                 "dt", "t_final", "seed", "n_realizations")
        return {name: getattr(self, name) for name in names}


CONFIG_KEYS = tuple(SimConfig().as_dict())


def validate_config(raw: SimConfig) -> SimConfig:
    """Check every invariant of ``raw`` and return it with derived fields set.

    All failed checks are collected and raised together as a ConfigError.
    Validating an already validated config returns an equal value.
    """
    bad = []
    if not raw.diffusion >= 0:
        bad.append("NegativeDiffusion")
    if not raw.rate >= 0:
        bad.append("NegativeRate")
    if not raw.c0 > 0:
        bad.append("NonPositiveConcentration")
    if not raw.omega > 0:
        bad.append("NonPositiveDomain")
    if not raw.dt > 0:
        bad.append("NonPositiveTimeStep")
    if not raw.t_final >= raw.dt:
        bad.append("FinalTimeBeforeFirstStep")
    if int(raw.dim) != raw.dim or raw.dim < 1:
        bad.append("InvalidDimension")
    if int(raw.n_delta) != raw.n_delta or raw.n_delta < 1:
        bad.append("NonPositiveDiracCount")
    if int(raw.n_g) != raw.n_g or not 1 <= raw.n_g <= raw.n_delta:
        bad.append("GaussianCountExceedsDirac")
    if int(raw.n_realizations) != raw.n_realizations or raw.n_realizations < 1:
        bad.append("InvalidRealizations")
    if int(raw.seed) != raw.seed or not 0 <= raw.seed < 2**64:
        bad.append("InvalidSeed")
    if bad:
        raise ConfigError(bad)

    n_delta, n_g = int(raw.n_delta), int(raw.n_g)
    return dataclasses.replace(
        raw,
        dim=int(raw.dim), n_delta=n_delta, n_g=n_g, seed=int(raw.seed),
        n_realizations=int(raw.n_realizations),
        m_delta=raw.c0 * raw.omega / n_delta,
        m_g=raw.c0 * raw.omega / n_g,
        dx_delta=raw.omega / n_delta,
        dx_g=raw.omega / n_g,
    )


def damkohler(config: SimConfig, n_p: int) -> float:
    """Particle Damkohler number k*C0*dx^2/D with dx = omega/n_p."""
    if config.diffusion == 0:
        raise ZeroDiffusion("Damkohler number is undefined for D = 0")
    dx = config.omega / n_p
    return config.rate * config.c0 * dx * dx / config.diffusion


@dataclass(frozen=True)
class KernelSpec:
    """Particle kernel: Dirac point mass, fixed Gaussian, or time-varying Gaussian.

    ``width`` is the Gaussian half-width; a fixed Gaussian of zero width is
    normalized to Dirac.  For the variable variant the width is recomputed by
    the engine each step and the stored value is ignored.
    """

    variant: str = DIRAC
    width: float = 0.0

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if not self.width >= 0:
            raise ValueError("kernel width must be non-negative")
        if self.variant == FIXED and self.width == 0:
            object.__setattr__(self, "variant", DIRAC)
        if self.variant != FIXED:
            object.__setattr__(self, "width", 0.0)

    @classmethod
    def dirac(cls) -> "KernelSpec":
        return cls(DIRAC, 0.0)

    @classmethod
    def fixed(cls, width: float) -> "KernelSpec":
        return cls(FIXED, float(width))

    @classmethod
    def variable(cls) -> "KernelSpec":
        return cls(VARIABLE, 0.0)

    @property
    def is_dirac(self) -> bool:
        return self.variant == DIRAC

    def label(self) -> str:
        if self.variant == FIXED:
            return f"gaussian(width={self.width:.17g})"
        return "variable" if self.variant == VARIABLE else "dirac"


@dataclass(frozen=True)
class ConcentrationTrace:
    """Domain-averaged concentration on an output grid, with ensemble spread."""

    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if times.ndim != 1 or mean.shape != times.shape or std.shape != times.shape:
            raise ValueError("times, mean and std must be 1-D arrays of equal length")
        if times.size and np.any(np.diff(times) <= 0):
            raise ValueError("trace times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def __len__(self):
        return self.times.size

    def at(self, t: float) -> float:
        """Mean concentration at an exact grid time."""
        idx = np.flatnonzero(np.isclose(self.times, t, rtol=1e-12, atol=0))
        if idx.size == 0:
            raise KeyError(f"time {t} not on trace grid")
        return float(self.mean[idx[0]])


def log_grid(t_lo: float, t_hi: float, n: int = 200) -> np.ndarray:
    return np.logspace(math.log10(t_lo), math.log10(t_hi), n)


def snap_to_steps(times, dt: float) -> np.ndarray:
    """Round requested output times to whole time steps, dropping duplicates."""
    steps = np.unique(np.maximum(np.rint(np.asarray(times) / dt), 1).astype(np.int64))
    return steps * dt


def step_grid(config: SimConfig, n: int = 200) -> np.ndarray:
    """Default particle output grid: ``n`` log-spaced times snapped to steps."""
    return snap_to_steps(log_grid(config.dt, config.t_final, n), config.dt)
