"""Semi-implicit finite-difference reference solver on a periodic 1-D grid.

Diffusion is backward Euler with a central second difference; the
reaction sink uses both concentrations from the previous step, so each
step is two linear circulant solves and no nonlinear iteration.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_circulant

from .core import ConcentrationTrace, KrptError, SimConfig, step_grid
from .engine import _grid_steps, realization_seed, reduce_ensemble, worker_count


class NegativeConcentrationRisk(KrptError, ValueError):
    pass


class NegativeConcentration(KrptError, RuntimeError):
    pass


@dataclass
class GridField:
    dx: float
    values_a: np.ndarray
    values_b: np.ndarray
    time: float = 0.0

    def mean_a(self, omega: float) -> float:
        return math.fsum(self.values_a) * self.dx / omega

    def mean_b(self, omega: float) -> float:
        return math.fsum(self.values_b) * self.dx / omega


def default_amplitude(config: SimConfig) -> float:
    """Perturbation amplitude whose cell variance a^2/3 equals C0*m_delta/dx.

    Capped at C0 so that no cell can start negative.
    """
    dx = config.omega / config.n_delta
    m = config.c0 * config.omega / config.n_delta
    return min(math.sqrt(3.0 * config.c0 * m / dx), config.c0)


def fd_initialize(config: SimConfig, amplitude: float | None = None, seed=None) -> GridField:
    """Cells of width omega/N_delta, each species C0 + U(-a, a) independently."""
    if config.dim != 1:
        raise ValueError("the finite-difference solver is one-dimensional")
    a = default_amplitude(config) if amplitude is None else float(amplitude)
    if a < 0:
        raise ValueError("amplitude must be non-negative")
    if a > config.c0:
        raise NegativeConcentrationRisk(
            f"amplitude {a:g} exceeds C0={config.c0:g}; cells could start negative")
    n = config.n_delta
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(
        np.random.Philox(np.random.SeedSequence(config.seed if seed is None else seed)))
    values_a = config.c0 + rng.uniform(-a, a, n)
    values_b = config.c0 + rng.uniform(-a, a, n)
    return GridField(config.omega / n, values_a, values_b)


def diffusion_column(n: int, dx: float, diffusion: float, dt: float) -> np.ndarray:
    """First column of the circulant matrix I - D dt L."""
    r = diffusion * dt / (dx * dx)
    col = np.zeros(n)
    col[0] = 1.0 + 2.0 * r
    if n == 1:
        col[0] = 1.0
    elif n == 2:
        col[1] = -2.0 * r
    else:
        col[1] = -r
        col[-1] = -r
    return col


def fd_step(field: GridField, config: SimConfig, column: np.ndarray | None = None) -> GridField:
    """Advance one dt in place and return the field.

    ``column`` may carry a precomputed diffusion_column for speed.
    """
    if column is None:
        column = diffusion_column(field.values_a.size, field.dx, config.diffusion, config.dt)
    sink = config.rate * config.dt * field.values_a * field.values_b
    rhs = np.stack([field.values_a - sink, field.values_b - sink], axis=1)
    if config.diffusion > 0:
        new = solve_circulant(column, rhs)
    else:
        new = rhs
    if new.min() < -1e-10:
        raise NegativeConcentration(
            f"cell concentration {new.min():.3e} at t={field.time + config.dt:g}; reduce dt")
    field.values_a = np.ascontiguousarray(new[:, 0])
    field.values_b = np.ascontiguousarray(new[:, 1])
    field.time += config.dt
    return field


def fd_solve(config: SimConfig, amplitude: float | None = None, seed=None,
             output_grid=None) -> ConcentrationTrace:
    """Domain-mean A concentration of one perturbed run, recorded on step times."""
    grid = step_grid(config) if output_grid is None else np.asarray(output_grid, float)
    rec_steps = _grid_steps(grid, config.dt)
    field = fd_initialize(config, amplitude, seed)
    column = diffusion_column(field.values_a.size, field.dx, config.diffusion, config.dt)
    out = np.empty(grid.size)
    pos = 0
    while pos < grid.size and rec_steps[pos] == 0:
        out[pos] = field.mean_a(config.omega)
        pos += 1
    for n in range(int(rec_steps.max())):
        fd_step(field, config, column)
        while pos < grid.size and rec_steps[pos] == n + 1:
            out[pos] = field.mean_a(config.omega)
            pos += 1
    return ConcentrationTrace(grid, out, np.zeros_like(out))


def _solve_one(args):
    config, amplitude, seed, grid = args
    return fd_solve(config, amplitude, seed, grid).mean


def fd_ensemble(config: SimConfig, amplitude: float | None = None, output_grid=None,
                realizations=None, workers: int | None = None) -> ConcentrationTrace:
    """Average fd_solve over seeds ``config.seed ^ r``, as for particle ensembles."""
    grid = step_grid(config) if output_grid is None else np.asarray(output_grid, float)
    reals = list(range(config.n_realizations)) if realizations is None else list(realizations)
    if not reals:
        raise ValueError("need at least one realization")
    jobs = [(config, amplitude, realization_seed(config.seed, r), grid) for r in reals]
    workers = min(workers or worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_solve_one, jobs))
    else:
        results = [_solve_one(job) for job in jobs]
    return reduce_ensemble(grid, dict(zip(reals, results)))
