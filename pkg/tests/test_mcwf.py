import math
import warnings

import numpy as np
import pytest
from scipy import stats as sps
from scipy.linalg import expm

from cavitylattice.mcwf import (
    BandOverlapWarning,
    EnsembleStats,
    OffGridWarning,
    TrajectoryConfig,
    ValidationOracle,
    branch_occupancy,
    integrate_master_equation,
    joint_distribution,
    run_ensemble,
    run_trajectory,
    sample_grid,
    time_window_average,
    trajectory_seeds,
)
from cavitylattice.meanfield import SelfConsistentBranch
from cavitylattice.model import (
    HilbertGeometry,
    ModelParams,
    QuantumState,
    hamiltonian_matrix,
    kinetic_matrix,
    number_matrix,
)

TINY = HilbertGeometry(3, 4)
GENERIC = ModelParams(1.0, -2.0, -2.0, 1.0)


def decay_config(**kw):
    base = dict(geometry=HilbertGeometry(2, 2), params=ModelParams(0.0, 0.0, 0.0, 1.0), t_final=4.0,
                sample_dt=0.5)
    base.update(kw)
    return TrajectoryConfig(**base)


def branch(n, stable=True):
    return SelfConsistentBranch(0, "test", 0.0, n, 0.5, 0.0, stable, 0.0)


def test_sample_grid_uses_integer_multiples():
    grid = sample_grid(310.0, 0.05)
    assert grid.size == 6201
    assert grid[-1] == 310.0
    assert grid[3] == 3 * 0.05


def test_seeds_are_pure_functions_of_index():
    assert trajectory_seeds(5, 4) == trajectory_seeds(5, 10)[:4]
    assert len(set(trajectory_seeds(5, 1000))) == 1000
    assert trajectory_seeds(5, 3) != trajectory_seeds(6, 3)


def test_single_photon_decay_has_one_jump():
    rec = run_trajectory(decay_config(t_final=40.0, seed=3))
    assert rec.jump_times.size == 1
    before = rec.times < rec.jump_times[0]
    np.testing.assert_allclose(rec.n_mean[before], 1.0, atol=1e-12)
    np.testing.assert_allclose(rec.n_mean[~before], 0.0, atol=1e-12)


def test_jump_time_distribution_is_exponential():
    kappa = 0.7
    cfg = decay_config(params=ModelParams(0.0, 0.0, 0.0, kappa), t_final=30.0, sample_dt=30.0)
    times = []
    for seed in trajectory_seeds(11, 10_000):
        rec = run_trajectory(cfg.replace(seed=seed))
        assert rec.jump_times.size == 1
        times.append(rec.jump_times[0])
    result = sps.kstest(times, sps.expon(scale=1 / (2 * kappa)).cdf)
    assert result.pvalue > 1e-3


def test_no_jump_evolution_matches_matrix_exponential():
    # with kappa tiny the jump probability over t=1 is ~1e-9, so the
    # trajectory is the normalized non-Hermitian evolution
    geometry = HilbertGeometry(5, 4)
    params = ModelParams(0.8, -1.3, -2.1, 1e-9)
    cfg = TrajectoryConfig(geometry, params, n0=1, j0=2, t_final=1.0, sample_dt=1.0, tol=1e-10, seed=1)
    rec = run_trajectory(cfg)
    assert rec.jump_times.size == 0
    h_eff = hamiltonian_matrix(geometry, params) - 1j * params.kappa * number_matrix(geometry)
    psi = expm(-1j * h_eff * 1.0) @ cfg.initial_state().amplitudes.reshape(-1)
    psi /= np.linalg.norm(psi)
    overlap = abs(np.vdot(psi, rec.final_state.amplitudes.reshape(-1)))
    assert overlap == pytest.approx(1.0, abs=1e-9)
    n_exact = np.vdot(psi, number_matrix(geometry) @ psi).real
    assert rec.n_mean[-1] == pytest.approx(n_exact, abs=1e-8)


def test_trajectory_is_deterministic():
    cfg = TrajectoryConfig(TINY, GENERIC, t_final=5.0, seed=42)
    a, b = run_trajectory(cfg), run_trajectory(cfg)
    np.testing.assert_array_equal(a.n_mean, b.n_mean)
    np.testing.assert_array_equal(a.jump_times, b.jump_times)
    c = run_trajectory(cfg.replace(seed=43))
    assert not np.array_equal(a.n_mean, c.n_mean)


def test_single_member_ensemble_equals_record():
    cfg = TrajectoryConfig(TINY, GENERIC, t_final=3.0, seed=0)
    stats = run_ensemble(cfg, 1, base_seed=9)
    rec = run_trajectory(cfg.replace(seed=stats.seeds[0]))
    np.testing.assert_array_equal(stats.n_mean, rec.n_mean)
    np.testing.assert_array_equal(stats.e_kin, rec.e_kin)
    np.testing.assert_array_equal(stats.n_sem, 0.0)


def test_ensemble_independent_of_workers():
    cfg = TrajectoryConfig(TINY, GENERIC, t_final=3.0, joint_times=(1.0, 3.0))
    one = run_ensemble(cfg, 12, base_seed=4, workers=1)
    three = run_ensemble(cfg, 12, base_seed=4, workers=3)
    again = run_ensemble(cfg, 12, base_seed=4, workers=1)
    for other in (three, again):
        np.testing.assert_array_equal(one.n_mean, other.n_mean)
        np.testing.assert_array_equal(one.e_kin_sem, other.e_kin_sem)
        np.testing.assert_array_equal(one.joint, other.joint)


def test_joint_distribution_initial_delta():
    cfg = TrajectoryConfig(TINY, GENERIC, t_final=2.0, joint_times=(0.0, 2.0))
    stats = run_ensemble(cfg, 3)
    p0 = joint_distribution(stats, 0.0)
    expected = np.zeros(TINY.shape)
    expected[1, TINY.j_index(0)] = 1.0
    np.testing.assert_allclose(p0, expected, atol=1e-14)
    later = joint_distribution(stats, 2.0)
    assert later.sum() == pytest.approx(1.0, abs=1e-10)
    folded = joint_distribution(stats, 2.0, fold=True, geometry=TINY)
    assert folded.shape == (TINY.n_ph_max + 1, TINY.j_max + 1)
    assert folded.sum() == pytest.approx(1.0, abs=1e-10)


def test_joint_distribution_warns_off_grid():
    cfg = TrajectoryConfig(TINY, GENERIC, t_final=2.0, joint_times=(2.0,))
    stats = run_ensemble(cfg, 2)
    with pytest.warns(OffGridWarning):
        joint_distribution(stats, 1.93)


def test_odd_momenta_stay_empty_in_full_basis():
    geometry = HilbertGeometry(6, 6)
    cfg = TrajectoryConfig(geometry, ModelParams(2.0, -3.0, -4.0, 1.0), t_final=10.0, joint_times=(10.0,))
    stats = run_ensemble(cfg, 5)
    assert stats.max_odd_weight <= 1e-12
    odd = geometry.js % 2 != 0
    assert np.all(joint_distribution(stats, 10.0)[:, odd] <= 1e-12)


def test_empty_cavity_reaches_coherent_steady_state():
    cfg = TrajectoryConfig(HilbertGeometry(16, 2), ModelParams(2.0, 0.0, 0.0, 1.0), t_final=12.0,
                           sample_dt=1.0, tol=1e-7)
    stats = run_ensemble(cfg, 30, base_seed=1)
    assert abs(stats.n_mean[-1] - 4.0) < max(3 * stats.n_sem[-1], 1e-3)


def test_window_average_of_constant_and_decay():
    cfg = decay_config(t_final=6.0, sample_dt=0.1)
    stats = run_ensemble(cfg, 20)
    rec = run_trajectory(cfg.replace(seed=1))
    const = time_window_average(rec, (2.0, 4.0), "bunching")
    assert const.mean == pytest.approx(0.5, abs=1e-15)
    assert const.samples == 20
    # noiseless decay from the oracle: the window mean is the mean of the sampled values
    oracle = integrate_master_equation(ValidationOracle.pure(cfg.initial_state()), cfg.params, 6.0, 0.1)
    mask = (oracle.times > 1.0 + 1e-12) & (oracle.times <= 3.0 + 1e-12)
    np.testing.assert_allclose(oracle.n_mean, np.exp(-2 * oracle.times), atol=1e-9)
    exact = np.mean(np.exp(-2 * oracle.times[mask]))
    assert np.mean(oracle.n_mean[mask]) == pytest.approx(exact, abs=1e-9)
    assert np.mean(np.exp(-2 * sample_grid(6.0, 0.1)[mask])) == pytest.approx(exact, abs=1e-12)
    win = time_window_average(stats, (1.0, 3.0), "n_mean")
    assert win.samples == 20


def test_window_must_contain_samples():
    rec = run_trajectory(decay_config(t_final=1.0, sample_dt=0.5))
    with pytest.raises(ValueError):
        time_window_average(rec, (0.6, 0.9))


def test_branch_occupancy_constant_series():
    occ = branch_occupancy(np.full(50, 4.0), [branch(1.0), branch(4.0), branch(9.0, stable=False)], 0.5)
    assert occ[1] == 1.0 and occ[0] == 0.0 and occ["transit"] == 0.0
    assert 2 not in occ


def test_branch_occupancy_all_transit():
    occ = branch_occupancy(np.full(10, 20.0), [branch(1.0), branch(4.0)], 0.5)
    assert occ["transit"] == 1.0


def test_branch_occupancy_shrinks_overlapping_bands():
    with pytest.warns(BandOverlapWarning):
        occ = branch_occupancy(np.array([1.0, 1.4, 1.6, 2.0]), [branch(1.0), branch(2.0)], 1.0)
    assert occ[0] == 0.5 and occ[1] == 0.5


def test_oracle_photon_decay():
    geometry = HilbertGeometry(3, 2)
    oracle = ValidationOracle.pure(QuantumState.basis(geometry, 1, 0))
    oracle.check()
    series = integrate_master_equation(oracle, ModelParams(0.0, 0.0, 0.0, 0.5), 5.0, 0.25)
    np.testing.assert_allclose(series.n_mean, np.exp(-series.times), atol=1e-9)
    np.testing.assert_allclose(series.trace, 1.0, atol=1e-10)
    series.final.check()


def test_oracle_coherent_drive():
    params = ModelParams(1.5, -1.0, 0.0, 1.0)
    geometry = HilbertGeometry(14, 2)
    series = integrate_master_equation(ValidationOracle.pure(QuantumState.basis(geometry, 0, 0)), params, 4.0, 0.2)
    rate = 1j * params.delta_c - params.kappa
    alpha = -params.eta / rate * (1 - np.exp(rate * series.times))
    np.testing.assert_allclose(series.alpha, alpha, atol=1e-8)
    np.testing.assert_allclose(series.n_mean, np.abs(alpha) ** 2, atol=1e-7)


def test_oracle_rejects_large_or_invalid_states():
    with pytest.raises(ValueError):
        ValidationOracle(np.eye(10), HilbertGeometry(30, 10))
    bad = ValidationOracle(np.diag([0.5, 0.6] + [0.0] * (TINY.dim - 2)), TINY)
    with pytest.raises(ValueError):
        bad.check()


def test_small_ensemble_tracks_oracle():
    cfg = TrajectoryConfig(TINY, GENERIC, t_final=4.0, sample_dt=0.5)
    stats = run_ensemble(cfg, 300, base_seed=2)
    series = integrate_master_equation(ValidationOracle.pure(cfg.initial_state()), GENERIC, 4.0, 0.5)
    floor = 1e-9
    z_n = np.abs(stats.n_mean - series.n_mean) / np.maximum(stats.n_sem, floor)
    z_e = np.abs(stats.e_kin - series.e_kin) / np.maximum(stats.e_kin_sem, floor)
    assert np.max(z_n[1:]) < 4 and np.max(z_e[1:]) < 4
    assert stats.n_mean[0] == series.n_mean[0] == 1.0


def test_truncation_flag_and_config_validation():
    rec = run_trajectory(TrajectoryConfig(HilbertGeometry(2, 2), ModelParams(3.0, 0.0, 0.0, 1.0), t_final=1.0))
    assert rec.truncation_warning
    with pytest.raises(ValueError):
        TrajectoryConfig(TINY, GENERIC, n0=9)
    with pytest.raises(ValueError):
        TrajectoryConfig(TINY, GENERIC, t_final=0.01, sample_dt=0.1)


def test_ensemble_stats_sem_definition():
    cfg = TrajectoryConfig(TINY, GENERIC, t_final=2.0)
    stats = run_ensemble(cfg, 6)
    assert isinstance(stats, EnsembleStats)
    data = stats.series["n_mean"]
    np.testing.assert_allclose(stats.n_sem, data.std(axis=0, ddof=1) / math.sqrt(6))
    kin = kinetic_matrix(TINY)
    assert np.all(stats.e_kin <= kin.max() + 1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        time_window_average(stats, (0.5, 2.0))
