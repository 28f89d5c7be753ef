import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from cavitylattice.bandstructure import LatticeProblem, bunching_parameter
from cavitylattice.meanfield import (
    BandCache,
    MeanFieldState,
    SelfConsistentBranch,
    classify_stability,
    effective_detuning,
    field_steady_state,
    heating_condition,
    integrate_meanfield,
    lorentzian,
    particle_bunching,
    residual,
    shared_cache,
    solve_selfconsistent_harmonic,
    solve_selfconsistent_wannier,
    stability_matrix,
    stationary_particle_state,
    trace_contour,
)
from cavitylattice.model import ModelParams

U0, KAPPA = -10.0, 1.0


@pytest.fixture(scope="module")
def cache():
    return shared_cache(U0, 36.0, 8)


def make_branch(params, b, n=None):
    """A branch at bunching b; n defaults to the self-consistent photon number."""
    delta = effective_detuning(params, b)
    if n is None:
        n = float(lorentzian(params, delta))
    return SelfConsistentBranch(0, "test", params.delta_c, n, b, delta, None, 0.0)


def test_field_steady_state_examples():
    assert field_steady_state(ModelParams(6.0, 0.0, 0.0, 1.0), 0.5) == pytest.approx(6.0)
    alpha = field_steady_state(ModelParams(1.0, 1.0, 0.0, 1.0), 0.3)
    assert alpha == pytest.approx((1 + 1j) / 2, abs=1e-15)
    assert abs(alpha) ** 2 == pytest.approx(0.5, abs=1e-15)
    assert field_steady_state(ModelParams(0.0, -3.0, -10.0, 1.0), 0.8) == 0


@pytest.mark.parametrize("eta", [2.0, 4.0, 6.0])
def test_harmonic_ground_level_has_unique_root(eta):
    for dc in np.linspace(-40.0, 15.0, 45):
        assert len(solve_selfconsistent_harmonic(0, ModelParams(eta, dc, U0, KAPPA))) == 1


def test_harmonic_first_level_has_two_roots_in_a_window():
    counts = [len(solve_selfconsistent_harmonic(1, ModelParams(4.0, dc, U0, KAPPA)))
              for dc in np.arange(-12.0, -6.0, 0.5)]
    assert max(counts) == 2
    assert set(counts) <= {0, 1, 2}


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 8.0), st.floats(-40.0, 10.0), st.integers(0, 3))
def test_harmonic_roots_satisfy_equation(eta, dc, n_ho):
    params = ModelParams(eta, dc, U0, KAPPA)
    for br in solve_selfconsistent_harmonic(n_ho, params):
        assert residual(params, br) < 1e-8 * br.n_mean


def test_wannier_roots_satisfy_equation(cache):
    for m in (0, 2, 4):
        for dc in (-20.0, -12.0, -7.5, -4.0):
            params = ModelParams(6.0, dc, U0, KAPPA)
            for br in solve_selfconsistent_wannier(m, params, cache):
                assert residual(params, br) < 1e-8 * br.n_mean
                assert br.b == pytest.approx(bunching_parameter(LatticeProblem(U0 * br.n_mean), m), abs=1e-9)


def test_band4_three_roots_alternate_stability(cache):
    roots = solve_selfconsistent_wannier(4, ModelParams(6.0, -7.5, U0, KAPPA), cache)
    assert [br.stable for br in roots] == [True, False, True]
    assert roots[0].n_mean < roots[1].n_mean < roots[2].n_mean


def test_far_detuned_root(cache):
    params = ModelParams(6.0, -200.0, U0, KAPPA)
    (root,) = solve_selfconsistent_wannier(0, params, cache)
    assert root.n_mean == pytest.approx(36.0 / 200.0**2, rel=0.1)
    assert root.stable


@pytest.mark.parametrize("dc", [-10.0, -9.5, -9.0])
def test_deep_ground_band_matches_oscillator(cache, dc):
    params = ModelParams(6.0, dc, U0, KAPPA)
    (w,) = solve_selfconsistent_wannier(0, params, cache)
    (h,) = solve_selfconsistent_harmonic(0, params)
    assert w.n_mean == pytest.approx(h.n_mean, rel=0.02)


def test_contour_apex(cache):
    points = trace_contour(0, "wannier", 6.0, U0, KAPPA, [36.0], cache=cache)
    plus, minus = points
    b36 = bunching_parameter(LatticeProblem(U0 * 36.0), 0)
    assert plus.delta_c == minus.delta_c == pytest.approx(U0 * b36, abs=1e-9)


def test_empty_cavity_contour_is_lorentzian():
    ns = np.geomspace(0.01, 4.0, 20)
    for p in trace_contour(0, "harmonic", 2.0, 0.0, KAPPA, ns):
        assert p.delta_c == pytest.approx(p.sign * math.sqrt(4.0 / p.n_mean - 1.0), abs=1e-12)


def test_contour_points_are_self_consistent(cache):
    for p in trace_contour(4, "wannier", 6.0, U0, KAPPA, 40, cache=cache):
        params = ModelParams(6.0, p.delta_c, U0, KAPPA)
        n = float(lorentzian(params, effective_detuning(params, p.b)))
        assert n == pytest.approx(p.n_mean, rel=1e-10)


def test_decoupled_stability_matrix():
    params = ModelParams(3.0, -2.0, U0, KAPPA)
    a = stability_matrix(params, make_branch(params, 0.7), lambda n: 0.7, d_delta_eff_dn=0.0)
    eig = np.sort_complex(np.linalg.eigvals(a.matrix))
    expected = np.sort_complex(np.array([-KAPPA + 1j * a.delta_eff, -KAPPA - 1j * a.delta_eff]))
    np.testing.assert_allclose(eig, expected, atol=1e-14)
    report = classify_stability(a, params)
    assert report.stable and report.by_eigenvalues and report.by_determinant and report.by_slope


def test_trace_and_determinant(cache):
    params = ModelParams(6.0, -7.5, U0, KAPPA)
    for br in solve_selfconsistent_wannier(4, params, cache):
        a = stability_matrix(params, br, lambda n: cache.exact_bunching(4, n))
        assert a.trace == -2.0 * KAPPA
        assert a.determinant.imag == pytest.approx(0.0, abs=1e-12 * abs(a.determinant))


def test_middle_branch_is_unstable(cache):
    params = ModelParams(6.0, -7.5, U0, KAPPA)
    middle = solve_selfconsistent_wannier(4, params, cache)[1]
    a = stability_matrix(params, middle, lambda n: cache.exact_bunching(4, n))
    report = classify_stability(a, params, middle)
    assert a.determinant.real < 0
    assert report.stable is False


def test_unit_slope_is_marginal():
    params = ModelParams(3.0, -2.0, U0, KAPPA)
    branch = make_branch(params, 0.6)
    delta = branch.delta_eff
    d = -((KAPPA**2 + delta**2) ** 2) / (2 * params.eta**2 * delta)
    a = stability_matrix(params, branch, lambda n: 0.6, d_delta_eff_dn=d)
    report = classify_stability(a, params)
    assert report.marginal and report.stable is None
    assert abs(report.determinant) < 1e-12 * (KAPPA**2 + delta**2)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(-30.0, 30.0), st.floats(-50.0, 50.0), st.floats(0.1, 5.0))
def test_stability_tests_agree(eta, delta, d, kappa):
    params = ModelParams(eta, 0.0, U0, kappa)
    b = (params.delta_c - delta) / params.u0
    a = stability_matrix(params, make_branch(params, b), lambda x: b, d_delta_eff_dn=d)
    report = classify_stability(a, params)
    assert a.trace == -2.0 * kappa
    if not report.marginal:
        assert report.by_eigenvalues == report.by_determinant == report.by_slope


def test_decoupled_field_relaxes():
    params = ModelParams(2.0, -3.0, 0.0, KAPPA)
    psi = np.zeros(21, dtype=complex)
    psi[10] = psi[12] = 1 / math.sqrt(2)
    series = integrate_meanfield(MeanFieldState(0.0, psi), params, 5.0, 0.25, rtol=1e-11, atol=1e-13)
    alpha_ss = params.eta / (KAPPA - 1j * params.delta_c)
    exact = alpha_ss * (1 - np.exp((1j * params.delta_c - KAPPA) * series.times))
    np.testing.assert_allclose(series.alpha, exact, atol=1e-9)
    js = np.arange(-10, 11)
    free = psi[None, :] * np.exp(-1j * np.outer(series.times, js**2))
    np.testing.assert_allclose(series.psi, free, atol=1e-8)


def _q0_root(params, m, j_max, lo, hi):
    def f(n):
        b = particle_bunching(stationary_particle_state(j_max, params.u0 * n, m))
        return float(lorentzian(params, effective_detuning(params, b))) - n

    n = brentq(f, lo, hi, xtol=1e-14)
    psi = stationary_particle_state(j_max, params.u0 * n, m)
    return n, psi, particle_bunching(psi)


def test_stable_fixed_point_is_stationary():
    params = ModelParams(6.0, -20.0, U0, KAPPA)
    n, psi, b = _q0_root(params, 0, 20, 0.05, 2.0)
    series = integrate_meanfield(MeanFieldState(field_steady_state(params, b), psi), params, 50.0, 0.5)
    assert np.max(np.abs(series.alpha - series.alpha[0])) < 1e-4
    assert np.max(np.abs(series.bunching - b)) < 1e-4


def test_unstable_fixed_point_departs():
    params = ModelParams(6.0, -7.5, U0, KAPPA)
    n, psi, b = _q0_root(params, 4, 20, 10.0, 20.0)
    branch = make_branch(params, b, n)
    a = stability_matrix(params, branch, lambda x: particle_bunching(stationary_particle_state(20, U0 * x, 4)))
    growth = max(np.linalg.eigvals(a.matrix).real)
    assert growth > 0
    series = integrate_meanfield(MeanFieldState(1.01 * field_steady_state(params, b), psi), params, 5.0, 0.1)
    dev = np.abs(series.n_mean - n)
    after = dev[series.times >= 1.0 / KAPPA]
    # past the damped transient the deviation grows monotonically at roughly the unstable rate
    assert np.all(np.diff(after) > 0)
    assert after[-1] > 5 * dev[0]
    rate = math.log(after[-1] / after[0]) / (series.times[-1] - 1.0 / KAPPA)
    assert 0.5 * growth < rate < 2.0 * growth


def test_heating_condition_far_detuned(cache):
    result = heating_condition(0, ModelParams(6.0, -500.0, U0, KAPPA), 0.5, cache)
    assert not result.heats and not result.marginal


def test_heating_condition_boundary_is_marginal():
    n = 5.0
    b0 = bunching_parameter(LatticeProblem(U0 * n), 0)
    b2 = bunching_parameter(LatticeProblem(U0 * n), 2)
    params = ModelParams(6.0, 0.5 * U0 * (b0 + b2), U0, KAPPA)
    result = heating_condition(0, params, n)
    assert result.marginal and not result.heats


def test_heating_boundary_crosses_ground_contour(cache):
    flags = []
    for p in trace_contour(0, "wannier", 6.0, U0, KAPPA, 60, cache=cache):
        params = ModelParams(6.0, p.delta_c, U0, KAPPA)
        flags.append(heating_condition(0, params, p.n_mean, cache).heats)
    assert any(flags) and not all(flags)


def test_band_cache_matches_exact(cache):
    for m in (0, 3, 6):
        for n in (0.3, 4.0, 17.0, 33.0):
            assert cache.bunching(m, n) == pytest.approx(cache.exact_bunching(m, n), abs=2e-4)


def test_band_cache_rejects_repulsive_lattice():
    with pytest.raises(ValueError):
        BandCache(1.0, 10.0)
