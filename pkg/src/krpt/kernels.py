"""Co-location probability and Gaussian kernel half-width selection.

Three ways of choosing the half-width of a reduced set of Gaussian
particles so that their mean-concentration curve tracks the Dirac one:

* ``width_at_time``: make the two cross-covariances equal at one time t*.
* ``least_squares_width``: minimize the RMS gap between the two moment
  solutions over a set of times.
* ``variable_width``: re-apply the single-time match at every step.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .core import DegenerateKernel, KernelSpec, KrptError, SimConfig
from . import moments

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
DOMAIN_RATIO_LIMIT = 0.12


class InfeasibleMatchTime(KrptError, ValueError):
    def __init__(self, t_star, tau_star):
        super().__init__(
            f"match time t*={t_star:g} exceeds the largest feasible time "
            f"tau*={tau_star:.10g}; the half-width would be imaginary")
        self.t_star = t_star
        self.tau_star = tau_star


class EmptyTimeGrid(KrptError, ValueError):
    pass


def colocation_probability(s, width: float, diffusion: float, dt: float, dim: int = 1):
    """Density that an A-B pair at separation ``s`` meets within one step.

    A Gaussian of variance 2*(width^2 + 2 D dt) per coordinate.  For
    ``dim`` > 1, ``s`` may be given as vectors along the last axis or as
    precomputed distances.
    """
    var = width * width + 2.0 * diffusion * dt
    if var <= 0:
        raise DegenerateKernel("zero kernel width and zero diffusion")
    s = np.asarray(s, dtype=float)
    r2 = s * s if (dim == 1 or s.ndim == 0 or s.shape[-1] != dim) else np.sum(s * s, axis=-1)
    out = (4.0 * math.pi * var) ** (-dim / 2.0) * np.exp(-r2 / (4.0 * var))
    return out if np.ndim(out) else float(out)


def width_radicand(t_star, n_g, n_delta, diffusion, omega, dim=1):
    """Squared half-width implied by matching at ``t_star`` (may be negative)."""
    ratio = n_g / n_delta
    bracket = ratio * ((8.0 * math.pi * diffusion * t_star) ** (-dim / 2.0) - 1.0 / omega) + 1.0 / omega
    return bracket ** (-2.0 / dim) / (4.0 * math.pi) - 2.0 * diffusion * t_star


def width_at_time(t_star, n_g, n_delta, diffusion, omega, dim=1) -> float:
    """Half-width that equalizes Dirac and Gaussian cross-covariance at ``t_star``."""
    if not t_star > 0:
        raise ValueError("match time must be positive")
    if n_g > n_delta:
        raise ValueError("N_G must not exceed N_delta")
    r = width_radicand(t_star, n_g, n_delta, diffusion, omega, dim)
    # with N_G = N_delta the radicand is zero up to rounding
    scale = 2.0 * diffusion * t_star
    if r < 0:
        if n_g == n_delta or r > -1e-12 * scale:
            return 0.0
        raise InfeasibleMatchTime(t_star, max_matching_time(n_g, n_delta, diffusion, omega, dim))
    return math.sqrt(r)


def max_matching_time(n_g, n_delta, diffusion, omega, dim=1, t_lo=None, rtol=1e-10) -> float:
    """Largest match time with a real half-width, by bracketing and bisection.

    Returns ``math.inf`` when no sign change is found (N_G = N_delta, or
    the bracket grows past 1e12).
    """
    if n_g >= n_delta:
        return math.inf
    def rad(t):
        return width_radicand(t, n_g, n_delta, diffusion, omega, dim)

    lo = t_lo if t_lo is not None else 1e-6 * omega ** (2.0 / dim) / diffusion
    if rad(lo) < 0:
        raise ValueError("radicand already negative at the lower bracket")
    hi = 2.0 * lo
    while rad(hi) >= 0:
        lo, hi = hi, 2.0 * hi
        if hi > 1e12:
            return math.inf
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if rad(mid) >= 0:
            lo = mid
        else:
            hi = mid
    return lo


def variable_width(t, config: SimConfig) -> float:
    """Time-dependent half-width: the single-time match applied at ``t``.

    Times below dt/2 use dt/2.  Past tau* the width is clamped to its value
    at tau*, which is zero.
    """
    t_eff = max(float(t), 0.5 * config.dt)
    args = (config.n_g, config.n_delta, config.diffusion, config.omega, config.dim)
    try:
        return width_at_time(t_eff, *args)
    except InfeasibleMatchTime as exc:
        log.warning("variable width clamped at tau*=%.6g (t=%.6g)", exc.tau_star, t_eff)
        return width_at_time(exc.tau_star, *args)


def golden_section(f, lo: float, hi: float, tol: float):
    """Minimize a unimodal ``f`` on [lo, hi] to bracket width ``tol``.

    Equal values keep the left sub-interval, so ties resolve toward ``lo``.
    Returns (x_min, f(x_min)).
    """
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def least_squares_objective(width, config: SimConfig, t_grid, dirac_cbar, solver=None) -> float:
    """RMS-type gap sqrt(sum |C_d - C_G(width)|^2) over ``t_grid``."""
    solver = solver or moments.solve_mean_concentration
    try:
        gauss = solver(KernelSpec.fixed(width), config, t_grid).cbar
    except moments.NoConvergence:
        return math.inf
    err = float(np.sqrt(np.sum((np.asarray(dirac_cbar) - gauss) ** 2)))
    return err if math.isfinite(err) else math.inf


def least_squares_width(t_grid, config: SimConfig, solver=None,
                        upper_fraction: float = 0.25, tol: float | None = None) -> float:
    """Half-width minimizing the Dirac/Gaussian moment-solution gap on ``t_grid``.

    Searches (0, upper_fraction * omega] by golden section to ``tol``
    (default 1e-4 * omega).  ``solver`` must accept (kernel, config, grid)
    and return an object with a ``cbar`` array.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size == 0:
        raise EmptyTimeGrid("least-squares matching needs at least one time")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    if not 0 < upper_fraction <= 1:
        raise ValueError("upper_fraction must lie in (0, 1]")
    solver = solver or moments.solve_mean_concentration
    tol = 1e-4 * config.omega if tol is None else tol

    dirac = solver(KernelSpec.dirac(), config, t_grid).cbar
    best, err = golden_section(
        lambda w: least_squares_objective(w, config, t_grid, dirac, solver),
        0.0, upper_fraction * config.omega, tol)
    log.info("least-squares half-width %.6g (objective %.6g)", best, err)
    check_domain_ratio(best, config.omega)
    return best


def check_domain_ratio(width: float, omega: float) -> bool:
    """Warn when width/omega exceeds the domain-effect rule of thumb."""
    if width / omega > DOMAIN_RATIO_LIMIT:
        log.warning("half-width/domain ratio %.4f exceeds %.2f; expect domain effects",
                    width / omega, DOMAIN_RATIO_LIMIT)
        return True
    return False
