"""Mass-transfer reactive particle tracking with Dirac or Gaussian kernels.

Each time step applies the pairwise A-B mass reduction first and then a
Brownian displacement, on a periodic domain of measure ``omega``.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np

from .core import (DIRAC, FIXED, VARIABLE, ConcentrationTrace, KernelSpec, KrptError,
                   SimConfig, step_grid)
from .kernels import DegenerateKernel, variable_width

log = logging.getLogger(__name__)

SEQUENTIAL = "sequential"
SUMMED = "summed"
PERIODIC = "periodic"
REFLECTING = "reflecting"


class MassOverdraw(KrptError, RuntimeError):
    pass


class EmptyTrace(KrptError, ValueError):
    pass


class InsufficientEnsemble(KrptError, ValueError):
    pass


@dataclass
class ParticleSystem:
    """Positions (N, d) and masses of both species on a periodic box."""

    pos_a: np.ndarray
    pos_b: np.ndarray
    mass_a: np.ndarray
    mass_b: np.ndarray
    kernel: KernelSpec
    side: float
    time: float = 0.0
    particle_mass: float = field(default=0.0)
    width: float = 0.0  # half-width in force during the last reaction step
    boundary: str = PERIODIC

    @property
    def periodic(self) -> bool:
        return self.boundary == PERIODIC

    @property
    def dim(self) -> int:
        return self.pos_a.shape[1]

    def total_a(self) -> float:
        return math.fsum(self.mass_a)

    def total_b(self) -> float:
        return math.fsum(self.mass_b)

    def copy(self) -> "ParticleSystem":
        return ParticleSystem(self.pos_a.copy(), self.pos_b.copy(), self.mass_a.copy(),
                              self.mass_b.copy(), self.kernel, self.side, self.time,
                              self.particle_mass, self.width, self.boundary)


def realization_seed(seed: int, r: int) -> int:
    return int(seed) ^ int(r)


def _streams(seed: int):
    init, noise = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.Philox(init)), np.random.Generator(np.random.Philox(noise))


def default_count(config: SimConfig, kernel: KernelSpec) -> int:
    return config.n_delta if kernel.is_dirac else config.n_g


def initialize(config: SimConfig, kernel: KernelSpec, seed, n_particles: int | None = None,
               boundary: str = PERIODIC) -> ParticleSystem:
    """Uniform i.i.d. positions for both species, every mass C0*omega/N.

    ``seed`` is an int or an existing numpy Generator.  ``boundary`` is
    "periodic" (minimum-image separations, wrapped steps) or "reflecting"
    (raw separations, mirrored steps).
    """
    if boundary not in (PERIODIC, REFLECTING):
        raise ValueError(f"unknown boundary {boundary!r}")
    n = n_particles or default_count(config, kernel)
    rng = seed if isinstance(seed, np.random.Generator) else _streams(seed)[0]
    side = config.side
    pos_a = rng.random((n, config.dim)) * side
    pos_b = rng.random((n, config.dim)) * side
    m = config.c0 * config.omega / n
    return ParticleSystem(pos_a, pos_b, np.full(n, m), np.full(n, m), kernel, side,
                          0.0, m, kernel.width, boundary)


# ---------------------------------------------------------------------------
# pair loops


@numba.njit(cache=True)
def _wrap(s, side, half):
    if s > half:
        s -= side
    elif s < -half:
        s += side
    return s


@numba.njit(cache=True)
def _react_exact(xa, ma, xb, mb, side, coef, inv4var, summed, periodic):
    # exp(-a) == 0.0 exactly for a > 746, so skipping those pairs changes nothing
    half = 0.5 * side if periodic else np.inf
    na, nb = ma.size, mb.size
    dim = xa.shape[1]
    da = np.zeros(na if summed else 0)
    db = np.zeros(nb if summed else 0)
    for j in range(na):
        mj = ma[j]
        for l in range(nb):
            r2 = 0.0
            for c in range(dim):
                s = _wrap(xa[j, c] - xb[l, c], side, half)
                r2 += s * s
            a = r2 * inv4var
            if a > 746.0:
                continue
            if summed:
                dm = coef * ma[j] * mb[l] * math.exp(-a)
                da[j] += dm
                db[l] += dm
            else:
                dm = coef * mj * mb[l] * math.exp(-a)
                mj -= dm
                mb[l] -= dm
        if not summed:
            ma[j] = mj
    if summed:
        for j in range(na):
            ma[j] -= da[j]
        for l in range(nb):
            mb[l] -= db[l]


@numba.njit(cache=True)
def _react_cells(xa, ma, xb, mb, side, coef, inv4var, cutoff, summed, periodic):
    """1-D cell-list version of _react_exact.

    B candidates for each A are visited in ascending index order (a 3-way
    merge of per-cell lists) so the sequential update matches the exact loop
    up to the pairs dropped beyond ``cutoff``.
    """
    half = 0.5 * side if periodic else np.inf
    na, nb = ma.size, mb.size
    ncell = int(side / cutoff)
    width = side / ncell
    cell_b = np.empty(nb, np.int64)
    counts = np.zeros(ncell + 1, np.int64)
    for l in range(nb):
        c = int(xb[l, 0] / width)
        if c >= ncell:
            c = ncell - 1
        cell_b[l] = c
        counts[c + 1] += 1
    for c in range(ncell):
        counts[c + 1] += counts[c]
    order = np.empty(nb, np.int64)
    fill = counts[:-1].copy()
    for l in range(nb):  # stable: indices ascend within each cell
        c = cell_b[l]
        order[fill[c]] = l
        fill[c] += 1
    cut2 = cutoff * cutoff
    da = np.zeros(na if summed else 0)
    db = np.zeros(nb if summed else 0)
    ptr = np.empty(3, np.int64)
    end = np.empty(3, np.int64)
    for j in range(na):
        x = xa[j, 0]
        cj = int(x / width)
        if cj >= ncell:
            cj = ncell - 1
        for q in range(3):
            c = cj + q - 1
            if periodic:
                c %= ncell
            elif c < 0 or c >= ncell:
                ptr[q] = 0
                end[q] = 0
                continue
            ptr[q] = counts[c]
            end[q] = counts[c + 1]
        mj = ma[j]
        while True:
            best = -1
            bl = nb
            for q in range(3):
                if ptr[q] < end[q] and order[ptr[q]] < bl:
                    bl = order[ptr[q]]
                    best = q
            if best < 0:
                break
            ptr[best] += 1
            s = _wrap(x - xb[bl, 0], side, half)
            r2 = s * s
            if r2 > cut2:
                continue
            if summed:
                dm = coef * ma[j] * mb[bl] * math.exp(-r2 * inv4var)
                da[j] += dm
                db[bl] += dm
            else:
                dm = coef * mj * mb[bl] * math.exp(-r2 * inv4var)
                mj -= dm
                mb[bl] -= dm
        if not summed:
            ma[j] = mj
    if summed:
        for j in range(na):
            ma[j] -= da[j]
        for l in range(nb):
            mb[l] -= db[l]


def current_width(system: ParticleSystem, config: SimConfig) -> float:
    if system.kernel.variant == VARIABLE:
        return variable_width(system.time, config)
    return system.kernel.width


def reaction_step(system: ParticleSystem, config: SimConfig, mode: str = SEQUENTIAL,
                  cell_list: bool = False, cutoff_sigmas: float = 8.0) -> ParticleSystem:
    """Pairwise probabilistic mass reduction over all A-B pairs (in place).

    ``mode`` is "sequential" (masses updated inside the loop, A outer and B
    inner in ascending index) or "summed" (all decrements from start-of-step
    masses).  With ``cell_list`` (d = 1 only), pairs farther apart than
    ``cutoff_sigmas`` standard deviations of the co-location density are
    skipped.
    """
    if mode not in (SEQUENTIAL, SUMMED):
        raise ValueError(f"unknown reaction mode {mode!r}")
    width = current_width(system, config)
    system.width = width
    if config.rate == 0:
        return system
    var = width * width + 2.0 * config.diffusion * config.dt
    if var <= 0:
        raise DegenerateKernel("zero kernel width and zero diffusion")
    d = system.dim
    coef = config.rate * config.dt * (4.0 * math.pi * var) ** (-d / 2.0)
    inv4var = 1.0 / (4.0 * var)
    summed = mode == SUMMED
    cutoff = cutoff_sigmas * math.sqrt(2.0 * var)
    if cell_list and d == 1 and system.side >= 3.0 * cutoff:
        _react_cells(system.pos_a, system.mass_a, system.pos_b, system.mass_b,
                     system.side, coef, inv4var, cutoff, summed, system.periodic)
    else:
        _react_exact(system.pos_a, system.mass_a, system.pos_b, system.mass_b,
                     system.side, coef, inv4var, summed, system.periodic)
    floor = -1e-12 * system.particle_mass
    if system.mass_a.min() < floor or system.mass_b.min() < floor:
        raise MassOverdraw(
            f"particle mass driven negative at t={system.time:g}; reduce dt (k*dt={config.rate * config.dt:g})")
    return system


def _wrap_positions(pos, side):
    np.mod(pos, side, out=pos)
    pos[pos >= side] = 0.0


def _reflect_positions(pos, side):
    np.mod(pos, 2.0 * side, out=pos)
    over = pos > side
    pos[over] = 2.0 * side - pos[over]


def diffusion_step(system: ParticleSystem, config: SimConfig, rng=None, xi=None) -> ParticleSystem:
    """Brownian displacement sqrt(2 D dt) * N(0, 1) per coordinate, then wrap.

    Either ``rng`` (a numpy Generator) or pre-drawn standard normals ``xi``
    of shape (N_A + N_B, d) must be given.
    """
    if config.diffusion == 0:
        return system
    na = system.pos_a.shape[0]
    if xi is None:
        xi = rng.standard_normal((na + system.pos_b.shape[0], system.dim))
    step = math.sqrt(2.0 * config.diffusion * config.dt)
    system.pos_a += step * xi[:na]
    system.pos_b += step * xi[na:]
    keep_inside = _wrap_positions if system.periodic else _reflect_positions
    keep_inside(system.pos_a, system.side)
    keep_inside(system.pos_b, system.side)
    return system


class CoupledNoise:
    """Brownian increments shared across a ladder of time steps.

    Runs with dt = fine_dt * 2**j (0 <= j <= levels) see the same underlying
    fine-scale path, so their results differ only through the time step.
    """

    def __init__(self, seed: int, fine_dt: float, levels: int):
        self.seed = int(seed)
        self.fine_dt = fine_dt
        self.levels = levels
        self._block = None
        self._cache = None

    def __call__(self, step: int, dt: float, shape):
        j = round(math.log2(dt / self.fine_dt))
        if not 0 <= j <= self.levels or not math.isclose(self.fine_dt * 2**j, dt, rel_tol=1e-9):
            raise ValueError("time step is not on the coupled ladder")
        per_block = 2 ** (self.levels - j)
        block, offset = divmod(step, per_block)
        if self._block != block:
            gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, block])))
            self._cache = gen.standard_normal((2**self.levels,) + tuple(shape))
            self._block = block
        group = 2**j
        chunk = self._cache[offset * group:(offset + 1) * group]
        return chunk.sum(axis=0) / math.sqrt(group)


# ---------------------------------------------------------------------------
# snapshots


@dataclass(frozen=True)
class Snapshot:
    time: float
    species: np.ndarray   # 0 for A, 1 for B
    position: np.ndarray  # (n, d)
    mass: np.ndarray
    threshold: float


def take_snapshot(system: ParticleSystem, threshold: float) -> Snapshot:
    keep_a = system.mass_a > threshold
    keep_b = system.mass_b > threshold
    species = np.concatenate([np.zeros(keep_a.sum(), int), np.ones(keep_b.sum(), int)])
    pos = np.concatenate([system.pos_a[keep_a], system.pos_b[keep_b]])
    mass = np.concatenate([system.mass_a[keep_a], system.mass_b[keep_b]])
    order = np.argsort(pos[:, 0], kind="stable")
    return Snapshot(system.time, species[order], pos[order], mass[order], threshold)


def segregated_blocks(snapshot: Snapshot) -> int:
    """Number of contiguous single-species runs along the periodic 1-D domain."""
    labels = snapshot.species
    if labels.size == 0:
        return 0
    changes = int(np.count_nonzero(labels[1:] != labels[:-1]))
    if labels[0] != labels[-1]:
        changes += 1
    return max(changes, 1)


# ---------------------------------------------------------------------------
# realizations and ensembles


class Realization(NamedTuple):
    trace: ConcentrationTrace
    snapshots: list
    system: ParticleSystem


def _grid_steps(times, dt):
    times = np.asarray(times, dtype=float)
    steps = np.rint(times / dt).astype(np.int64)
    if np.any(np.abs(steps * dt - times) > 1e-9 * np.maximum(times, dt)):
        raise ValueError("output times must be whole multiples of dt (see core.snap_to_steps)")
    return steps


def run_realization(config: SimConfig, kernel: KernelSpec, seed: int, output_grid=None,
                    snapshot_times=(), threshold: float | None = None,
                    mode: str = SEQUENTIAL, cell_list: bool = False,
                    noise=None, n_particles: int | None = None,
                    boundary: str = PERIODIC) -> Realization:
    """One stochastic run: reaction then diffusion each step until t_final.

    Records the domain-mean A concentration at ``output_grid`` (multiples of
    dt; default: log-spaced step times) and snapshots particles above
    ``threshold`` (default 2% of a Dirac particle's mass) at
    ``snapshot_times``.
    """
    if config.t_final < config.dt:
        raise EmptyTrace("t_final is shorter than one time step")
    grid = step_grid(config) if output_grid is None else np.asarray(output_grid, float)
    if grid.size == 0:
        raise EmptyTrace("empty output grid")
    rec_steps = _grid_steps(grid, config.dt)
    snap_steps = set(_grid_steps(snapshot_times, config.dt).tolist()) if len(snapshot_times) else set()
    if threshold is None:
        threshold = 0.02 * config.c0 * config.omega / config.n_delta
    n_total = int(max(rec_steps.max(), max(snap_steps, default=0)))

    init_rng, noise_rng = _streams(seed)
    system = initialize(config, kernel, init_rng, n_particles, boundary)
    shape = (system.pos_a.shape[0] + system.pos_b.shape[0], system.dim)
    out = np.empty(grid.size)
    snaps = []
    pos = 0
    while pos < grid.size and rec_steps[pos] == 0:
        out[pos] = system.total_a() / config.omega
        pos += 1
    if 0 in snap_steps:
        snaps.append(take_snapshot(system, threshold))
    for n in range(n_total):
        system.time = n * config.dt
        reaction_step(system, config, mode, cell_list)
        xi = noise(n, config.dt, shape) if noise is not None else None
        diffusion_step(system, config, noise_rng, xi)
        system.time = (n + 1) * config.dt
        while pos < grid.size and rec_steps[pos] == n + 1:
            out[pos] = system.total_a() / config.omega
            pos += 1
        if n + 1 in snap_steps:
            snaps.append(take_snapshot(system, threshold))
    trace = ConcentrationTrace(grid, out, np.zeros_like(out))
    return Realization(trace, snaps, system)


def worker_count() -> int:
    env = os.environ.get("KRPT_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, cap)


def _run_one(args):
    config, kernel, seed, grid, kwargs = args
    return run_realization(config, kernel, seed, grid, **kwargs).trace.mean


def reduce_ensemble(times, runs: dict) -> ConcentrationTrace:
    """Mean and sample std over realizations, reduced in realization order."""
    stack = np.array([runs[r] for r in sorted(runs)])
    std = stack.std(axis=0, ddof=1) if len(stack) > 1 else np.zeros(stack.shape[1])
    return ConcentrationTrace(times, stack.mean(axis=0), std)


def run_ensemble(config: SimConfig, kernel: KernelSpec, output_grid=None,
                 realizations=None, workers: int | None = None, **kwargs) -> ConcentrationTrace:
    """Run realizations r with seeds ``config.seed ^ r`` and reduce them.

    ``realizations`` defaults to range(config.n_realizations); the order they
    are given in does not affect the result.  Extra keyword arguments go to
    run_realization.
    """
    grid = step_grid(config) if output_grid is None else np.asarray(output_grid, float)
    reals = list(range(config.n_realizations)) if realizations is None else list(realizations)
    if not reals:
        raise ValueError("need at least one realization")
    jobs = [(config, kernel, realization_seed(config.seed, r), grid, kwargs) for r in reals]
    workers = min(workers or worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    return reduce_ensemble(grid, dict(zip(reals, results)))


# ---------------------------------------------------------------------------
# initial covariance estimation


@dataclass(frozen=True)
class CovarianceEstimate:
    lags: np.ndarray
    auto: np.ndarray
    auto_se: np.ndarray
    cross: np.ndarray
    cross_se: np.ndarray
    grid_width: float
    n_systems: int


def concentration_field(positions, mass, side, width, n_cells):
    """Concentration on ``n_cells`` points of a periodic 1-D grid.

    Gaussian kernels (variance width^2) are evaluated pointwise with
    periodic images; Dirac particles (width 0) are binned.
    """
    h = side / n_cells
    x = positions[:, 0]
    if width == 0:
        counts = np.bincount(np.minimum((x / h).astype(int), n_cells - 1), minlength=n_cells)
        return counts * mass / h
    grid = np.arange(n_cells) * h
    n_img = int(math.ceil(10.0 * width / side))
    field = np.zeros(n_cells)
    norm = mass / math.sqrt(2.0 * math.pi * width * width)
    for img in range(-n_img, n_img + 1):
        s = grid[:, None] - x[None, :] + img * side
        field += norm * np.exp(-s * s / (2.0 * width * width)).sum(axis=1)
    return field


def empirical_autocovariance(systems, lags, c0: float, min_systems: int = 50) -> CovarianceEstimate:
    """Spatial auto- and cross-covariance of initial fields, per lag.

    Each system contributes one spatially averaged estimate per lag; the
    ensemble mean and its standard error are returned.  Lags are rounded to
    the field grid (width <= half-width/4 for Gaussian kernels, omega/N for
    Dirac) and the rounded values are reported.
    """
    systems = list(systems)
    if len(systems) < min_systems:
        raise InsufficientEnsemble(f"need at least {min_systems} systems, got {len(systems)}")
    first = systems[0]
    if first.dim != 1:
        raise NotImplementedError("covariance estimation is implemented for d = 1")
    side = first.side
    width = first.kernel.width
    n_cells = int(math.ceil(4.0 * side / width)) if width > 0 else first.pos_a.shape[0]
    h = side / n_cells
    shifts = np.rint(np.asarray(lags, dtype=float) / h).astype(int)

    auto = np.empty((len(systems), shifts.size))
    cross = np.empty_like(auto)
    for i, sys_ in enumerate(systems):
        fa = concentration_field(sys_.pos_a, sys_.particle_mass, side, width, n_cells) - c0
        fb = concentration_field(sys_.pos_b, sys_.particle_mass, side, width, n_cells) - c0
        for q, sh in enumerate(shifts):
            auto[i, q] = 0.5 * (np.mean(fa * np.roll(fa, -sh)) + np.mean(fb * np.roll(fb, -sh)))
            cross[i, q] = np.mean(fa * np.roll(fb, -sh))
    n = len(systems)
    return CovarianceEstimate(shifts * h, auto.mean(0), auto.std(0, ddof=1) / math.sqrt(n),
                              cross.mean(0), cross.std(0, ddof=1) / math.sqrt(n), h, n)


def expected_autocovariance(lag, width: float, c0: float, mass: float, omega: float, dim: int = 1):
    """Initial autocovariance of a uniformly seeded Gaussian-kernel field."""
    lag = np.asarray(lag, dtype=float)
    peak = (4.0 * math.pi * width * width) ** (-dim / 2.0)
    return c0 * mass * (peak * np.exp(-lag * lag / (4.0 * width * width)) - 1.0 / omega)
