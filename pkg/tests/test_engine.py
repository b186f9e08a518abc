import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krpt.core import KernelSpec, SimConfig, validate_config
from krpt.kernels import colocation_probability, variable_width
from krpt import engine
from krpt.engine import (CoupledNoise, EmptyTrace, InsufficientEnsemble, MassOverdraw,
                         ParticleSystem, Snapshot, diffusion_step, empirical_autocovariance,
                         expected_autocovariance, initialize, reaction_step, run_ensemble,
                         run_realization, segregated_blocks, take_snapshot)
from krpt.moments import well_mixed


def pair_system(xa, xb, m=1e-3, kernel=KernelSpec.dirac(), side=1.0, boundary="periodic"):
    pos_a = np.array(xa, dtype=float).reshape(-1, 1)
    pos_b = np.array(xb, dtype=float).reshape(-1, 1)
    return ParticleSystem(pos_a, pos_b, np.full(len(pos_a), m), np.full(len(pos_b), m),
                          kernel, side, 0.0, m, kernel.width, boundary)


def test_initialize_mass_and_positions(base_config):
    sys_ = initialize(base_config, KernelSpec.dirac(), 7)
    assert sys_.pos_a.shape == (1000, 1)
    assert sys_.total_a() == pytest.approx(1.0, abs=1e-15)
    assert sys_.total_b() == pytest.approx(1.0, abs=1e-15)
    assert sys_.total_a() / base_config.omega == pytest.approx(base_config.c0)
    assert np.all((sys_.pos_a >= 0) & (sys_.pos_a < 1.0))
    gauss = initialize(base_config, KernelSpec.fixed(0.1), 7)
    assert gauss.pos_a.shape == (100, 1) and gauss.particle_mass == pytest.approx(0.01)


def test_initialize_deterministic(base_config):
    a = initialize(base_config, KernelSpec.dirac(), 99)
    b = initialize(base_config, KernelSpec.dirac(), 99)
    assert np.array_equal(a.pos_a, b.pos_a) and np.array_equal(a.pos_b, b.pos_b)
    c = initialize(base_config, KernelSpec.dirac(), 98)
    assert not np.array_equal(a.pos_a, c.pos_a)


def test_initialize_bad_boundary(base_config):
    with pytest.raises(ValueError):
        initialize(base_config, KernelSpec.dirac(), 1, boundary="open")


def test_zero_rate_leaves_system_untouched(base_config):
    cfg = base_config.replace(rate=0.0)
    sys_ = initialize(cfg, KernelSpec.dirac(), 3)
    before = sys_.copy()
    reaction_step(sys_, cfg)
    assert np.array_equal(sys_.mass_a, before.mass_a)
    assert np.array_equal(sys_.mass_b, before.mass_b)
    assert np.array_equal(sys_.pos_a, before.pos_a)


def test_single_pair_hand_value(base_config):
    sys_ = pair_system([0.4], [0.41])
    reaction_step(sys_, base_config)
    v = 1.0 / math.sqrt(8 * math.pi * 1e-6) * math.exp(-1e-4 / 8e-6)
    dm = 5 * 0.1 * 1e-6 * v
    assert 1e-3 - sys_.mass_a[0] == pytest.approx(dm, rel=1e-12)
    assert sys_.mass_a[0] == sys_.mass_b[0]


def test_pair_across_periodic_boundary(base_config):
    near = pair_system([0.995], [0.005])
    reaction_step(near, base_config)
    direct = pair_system([0.4], [0.41])
    reaction_step(direct, base_config)
    assert near.mass_a[0] == pytest.approx(direct.mass_a[0], rel=1e-12)
    far = pair_system([0.995], [0.005], boundary="reflecting")
    reaction_step(far, base_config)
    assert far.mass_a[0] == pytest.approx(1e-3, rel=1e-12)


def test_sequential_update_order(base_config):
    # the second B sees the A mass already reduced by the first
    sys_ = pair_system([0.5], [0.5, 0.5])
    reaction_step(sys_, base_config)
    c = 5 * 0.1 * colocation_probability(0.0, 0.0, 1e-5, 0.1)
    m = 1e-3
    a1 = m - c * m * m
    b1 = a1
    a2 = a1 - c * a1 * m
    b2 = m - c * a1 * m
    assert sys_.mass_a[0] == pytest.approx(a2, rel=1e-13)
    assert sys_.mass_b == pytest.approx([b1, b2], rel=1e-13)


def test_summed_mode_uses_start_masses(base_config):
    sys_ = pair_system([0.5], [0.5, 0.5])
    reaction_step(sys_, base_config, mode="summed")
    c = 5 * 0.1 * colocation_probability(0.0, 0.0, 1e-5, 0.1)
    m = 1e-3
    assert sys_.mass_a[0] == pytest.approx(m - 2 * c * m * m, rel=1e-13)
    assert sys_.mass_b == pytest.approx([m - c * m * m] * 2, rel=1e-13)


def test_unknown_mode(base_config):
    with pytest.raises(ValueError):
        reaction_step(pair_system([0.1], [0.2]), base_config, mode="parallel")


def test_mass_difference_conserved_one_step(base_config):
    sys_ = initialize(base_config, KernelSpec.dirac(), 11)
    before = math.fsum(sys_.mass_a) - math.fsum(sys_.mass_b)
    reaction_step(sys_, base_config)
    after = sys_.total_a() - sys_.total_b()
    assert abs(after - before) <= 1e-14
    assert sys_.total_a() < 1.0


def test_mass_overdraw(base_config):
    cfg = base_config.replace(n_delta=20, n_g=10)
    sys_ = pair_system([0.5], [0.5], m=0.05)
    with pytest.raises(MassOverdraw):
        reaction_step(sys_, cfg, mode="summed")


@pytest.mark.parametrize("kernel", [KernelSpec.dirac(), KernelSpec.fixed(0.02)])
def test_cell_list_matches_exact(base_config, kernel):
    for seed in (1, 2):
        exact = initialize(base_config, kernel, seed)
        fast = exact.copy()
        for step in range(5):
            reaction_step(exact, base_config)
            reaction_step(fast, base_config, cell_list=True)
            rel = abs(fast.total_a() - exact.total_a()) / exact.total_a()
            assert rel <= 1e-9
            diffusion_step(exact, base_config, np.random.default_rng(step))
            diffusion_step(fast, base_config, np.random.default_rng(step))


def test_cell_list_reflecting_matches_exact(base_config):
    exact = initialize(base_config, KernelSpec.dirac(), 4, boundary="reflecting")
    exact.pos_a[:5, 0] = [0.0, 0.001, 0.999, 0.5, 1.0]
    fast = exact.copy()
    reaction_step(exact, base_config)
    reaction_step(fast, base_config, cell_list=True)
    assert abs(fast.total_a() - exact.total_a()) <= 1e-9 * exact.total_a()


def test_variable_kernel_width_per_step(base_config):
    sys_ = initialize(base_config, KernelSpec.variable(), 5)
    sys_.time = 50.0
    reaction_step(sys_, base_config)
    assert sys_.width == variable_width(50.0, base_config)


def test_diffusion_zero_d(base_config):
    cfg = base_config.replace(diffusion=0.0)
    sys_ = initialize(cfg, KernelSpec.dirac(), 5)
    before = sys_.pos_a.copy()
    diffusion_step(sys_, cfg, np.random.default_rng(0))
    assert np.array_equal(sys_.pos_a, before)


def test_diffusion_variance(base_config):
    n = 100_000
    sys_ = pair_system(np.full(n // 2, 0.5), np.full(n // 2, 0.5))
    diffusion_step(sys_, base_config, np.random.default_rng(2024))
    disp = np.concatenate([sys_.pos_a, sys_.pos_b])[:, 0] - 0.5
    assert disp.var(ddof=1) == pytest.approx(2 * 1e-5 * 0.1, rel=0.02)


def test_periodic_wrap(base_config):
    eps = 1e-4
    step = math.sqrt(2 * base_config.diffusion * base_config.dt)
    sys_ = pair_system([1.0 - eps], [0.5])
    xi = np.array([[2 * eps / step], [0.0]])
    diffusion_step(sys_, base_config, xi=xi)
    assert sys_.pos_a[0, 0] == pytest.approx(eps, abs=1e-12)


def test_reflecting_step(base_config):
    eps = 1e-4
    step = math.sqrt(2 * base_config.diffusion * base_config.dt)
    sys_ = pair_system([1.0 - eps], [eps], boundary="reflecting")
    xi = np.array([[2 * eps / step], [-3 * eps / step]])
    diffusion_step(sys_, base_config, xi=xi)
    assert sys_.pos_a[0, 0] == pytest.approx(1.0 - eps, abs=1e-12)
    assert sys_.pos_b[0, 0] == pytest.approx(2 * eps, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5.0, 5.0), st.sampled_from(["periodic", "reflecting"]))
def test_positions_stay_in_domain(shift, boundary):
    cfg = validate_config(SimConfig())
    sys_ = pair_system([0.3, 0.9], [0.0, 0.99], boundary=boundary)
    step = math.sqrt(2 * cfg.diffusion * cfg.dt)
    xi = np.full((4, 1), shift / step)
    diffusion_step(sys_, cfg, xi=xi)
    for pos in (sys_.pos_a, sys_.pos_b):
        assert np.all(pos >= 0) and np.all(pos <= 1.0)
        if boundary == "periodic":
            assert np.all(pos < 1.0)


def test_coupled_noise_shares_path():
    noise = CoupledNoise(5, 0.05, 2)
    fine = [noise(n, 0.05, (3, 1)) for n in range(4)]
    mid = [noise(n, 0.1, (3, 1)) for n in range(2)]
    coarse = noise(0, 0.2, (3, 1))
    np.testing.assert_allclose(mid[0] * math.sqrt(2), fine[0] + fine[1], rtol=1e-13)
    np.testing.assert_allclose(coarse * 2, sum(fine), rtol=1e-13)
    with pytest.raises(ValueError):
        noise(0, 0.15, (3, 1))


def test_empty_trace():
    raw = SimConfig(t_final=0.05)
    with pytest.raises(EmptyTrace):
        run_realization(raw, KernelSpec.dirac(), 1)


def test_realization_invariants(small_config):
    grid = np.arange(1, 51) * small_config.dt
    real = run_realization(small_config, KernelSpec.dirac(), 3, grid)
    c = real.trace.mean
    assert np.all(np.diff(c) <= 0)
    assert np.all(c > 0)
    sys_ = real.system
    assert abs(sys_.total_a() - sys_.total_b()) <= 1e-12 * small_config.c0 * small_config.omega
    assert np.all(sys_.mass_a >= 0) and np.all(sys_.mass_b >= 0)
    assert sys_.time == pytest.approx(5.0)


def test_realization_reproducible(small_config):
    a = run_realization(small_config, KernelSpec.fixed(0.05), 8).trace.mean
    b = run_realization(small_config, KernelSpec.fixed(0.05), 8).trace.mean
    assert np.array_equal(a, b)


def test_ensemble_single_realization_has_zero_std(small_config):
    tr = run_ensemble(small_config.replace(n_realizations=1), KernelSpec.dirac(), workers=1)
    assert np.all(tr.std == 0)


def test_ensemble_order_independent(small_config):
    cfg = small_config.replace(n_realizations=3)
    grid = np.array([1.0, 2.0, 5.0])
    a = run_ensemble(cfg, KernelSpec.fixed(0.05), grid, realizations=[0, 1, 2], workers=1)
    b = run_ensemble(cfg, KernelSpec.fixed(0.05), grid, realizations=[2, 0, 1], workers=1)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)


def test_ensemble_parallel_matches_serial(small_config):
    grid = np.array([1.0, 5.0])
    a = run_ensemble(small_config, KernelSpec.dirac(), grid, workers=1)
    b = run_ensemble(small_config, KernelSpec.dirac(), grid, workers=2)
    assert np.array_equal(a.mean, b.mean)


def test_snapshot_threshold_and_blocks():
    sys_ = pair_system([0.1, 0.2, 0.7], [0.4, 0.5, 0.9])
    sys_.mass_a[1] = 1e-9
    snap = take_snapshot(sys_, 1e-6)
    assert snap.threshold == 1e-6
    assert snap.mass.size == 5
    assert np.all(np.diff(snap.position[:, 0]) >= 0)
    # A(0.1) B(0.4) B(0.5) A(0.7) B(0.9) -> circular runs A | BB | A | B
    assert segregated_blocks(snap) == 4
    empty = Snapshot(0.0, np.array([], int), np.zeros((0, 1)), np.array([]), 0.0)
    assert segregated_blocks(empty) == 0


def test_realization_snapshots(small_config):
    real = run_realization(small_config, KernelSpec.dirac(), 3, np.array([5.0]),
                           snapshot_times=[0.0, 5.0])
    assert [s.time for s in real.snapshots] == pytest.approx([0.0, 5.0])
    assert real.snapshots[0].threshold == pytest.approx(0.02 * small_config.m_delta)


def test_insufficient_ensemble(base_config):
    systems = [initialize(base_config, KernelSpec.fixed(0.05), s) for s in range(10)]
    with pytest.raises(InsufficientEnsemble):
        empirical_autocovariance(systems, [0.0], 1.0)


def test_gaussian_autocovariance_plateau(base_config):
    width = 0.05
    systems = [initialize(base_config, KernelSpec.fixed(width), s) for s in range(60)]
    est = empirical_autocovariance(systems, [0.0, 0.5], 1.0)
    m = base_config.m_g
    lag0 = expected_autocovariance(0.0, width, 1.0, m, 1.0)
    assert lag0 == pytest.approx(m * ((4 * math.pi * width**2) ** -0.5 - 1.0))
    assert abs(est.auto[0] - lag0) <= 3 * est.auto_se[0]
    assert abs(est.auto[1] + m) <= 3 * est.auto_se[1]
    assert np.all(np.abs(est.cross) <= 3 * est.cross_se)


@pytest.mark.slow
def test_single_seed_slower_than_well_mixed(base_config):
    real = run_realization(base_config, KernelSpec.dirac(), base_config.seed, cell_list=True)
    late = real.trace.times > 10
    wm = well_mixed(real.trace.times, 1.0, 5.0)
    assert np.all(real.trace.mean[late] >= wm[late])


@pytest.mark.slow
def test_islands_at_late_time(base_config):
    real = run_realization(base_config, KernelSpec.dirac(), base_config.seed, np.array([1000.0]),
                           snapshot_times=[1000.0], cell_list=True)
    snap = real.snapshots[0]
    assert snap.mass.size > 0
    assert segregated_blocks(snap) <= 8


@pytest.mark.slow
def test_well_mixed_limit(base_config):
    cfg = base_config.replace(diffusion=1e-2, t_final=100.0, n_realizations=2)
    grid = np.array([1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0])
    tr = run_ensemble(cfg, KernelSpec.dirac(), grid)
    np.testing.assert_allclose(tr.mean, well_mixed(grid, 1.0, 5.0), rtol=0.05)


@pytest.mark.slow
def test_tiny_gaussian_equals_dirac(base_config):
    cfg = base_config.replace(n_g=1000, t_final=100.0, n_realizations=2)
    grid = np.array([1.0, 10.0, 100.0])
    dirac = run_ensemble(cfg, KernelSpec.dirac(), grid, cell_list=True)
    tiny = run_ensemble(cfg, KernelSpec.fixed(1e-6), grid, cell_list=True)
    assert np.all(np.abs(tiny.mean - dirac.mean) <= np.maximum(dirac.std, 1e-12))


@pytest.mark.slow
def test_summed_mode_close_to_sequential(base_config):
    cfg = base_config.replace(dt=0.01, t_final=10.0)
    grid = np.array([1.0, 10.0])
    seq = run_realization(cfg, KernelSpec.dirac(), 5, grid, cell_list=True).trace.mean
    summ = run_realization(cfg, KernelSpec.dirac(), 5, grid, mode="summed", cell_list=True).trace.mean
    np.testing.assert_allclose(summ, seq, rtol=0.02)
