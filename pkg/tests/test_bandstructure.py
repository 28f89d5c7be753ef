import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavitylattice.bandstructure import (
    ConvergenceError,
    LatticeProblem,
    band_table,
    build_wannier,
    bunching_parameter,
    harmonic_bunching,
    harmonic_bunching_flagged,
    solve_bloch,
    tanh_sinh_rule,
    wannier_spread,
    zone_averages,
)


def test_tanh_sinh_rule_integrates_smooth_functions():
    nodes, weights = tanh_sinh_rule(64)
    assert weights.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all((nodes >= 0) & (nodes <= 1)) and np.all(weights > 0)
    assert weights @ np.sqrt(nodes) == pytest.approx(2 / 3, abs=1e-12)


def test_free_band_zero_at_origin():
    sol = solve_bloch(LatticeProblem(0.0, 8, 16), 3)
    q = sol[0].q
    assert sol[0].energies[np.argmin(np.abs(q))] == 0.0


def test_free_band_one_at_zone_edge():
    sol = solve_bloch(LatticeProblem(0.0, 8, 16), 3)
    q = sol[1].q
    assert q[-1] == 1.0
    assert sol[1].energies[-1] == pytest.approx(1.0, abs=1e-14)
    assert sol[0].energies[-1] == pytest.approx(1.0, abs=1e-14)


def test_free_zone_averages_match_empty_lattice():
    # band m covers |q + 2l| in [m, m+1]; the average of k^2 over that range is (3m^2 + 3m + 1)/3
    avg, b = zone_averages(LatticeProblem(0.0, 8, 64), 4)
    expected = [(3 * m * m + 3 * m + 1) / 3 for m in range(5)]
    np.testing.assert_allclose(avg, expected, atol=1e-12)
    np.testing.assert_array_equal(b, 0.5)


def test_deep_ground_band_energy_is_harmonic():
    v0 = -100.0
    avg = solve_bloch(LatticeProblem(v0), 0)[0].band_avg_energy
    assert avg == pytest.approx(v0 + 0.5 * 2 * math.sqrt(-v0), rel=0.02)


@pytest.mark.parametrize("m", [1, 2, 4, 6])
def test_shallow_bands_unbunched(m):
    assert bunching_parameter(LatticeProblem(0.0), m) == 0.5
    assert bunching_parameter(LatticeProblem(-1e-3), m) == pytest.approx(0.5, abs=1e-3)


def test_deep_ground_bunching_limit():
    b0 = bunching_parameter(LatticeProblem(-400.0), 0)
    assert b0 == pytest.approx(1 - 1 / (2 * math.sqrt(400)), rel=0.01)


def test_band4_sequence_free_transition_bound():
    # b_4 just under 1/2 when nearly free, below 1/2 near the bound/free edge, above 1/2 when bound
    shallow = bunching_parameter(LatticeProblem(-2.0), 4)
    table = {v: solve_bloch(LatticeProblem(v), 4)[4] for v in (-45.0, -200.0)}
    assert 0.45 < shallow <= 0.5
    assert table[-45.0].bunching < 0.5
    assert table[-200.0].bunching > 0.5
    assert table[-200.0].bound and not table[-45.0].bound


def test_deep_ground_wannier_is_gaussian():
    v0 = -400.0
    band = build_wannier(LatticeProblem(v0), 0, window_periods=6, points_per_period=256)
    x = band.x
    dx = x[1] - x[0]
    g = np.exp(-math.sqrt(-v0) * x**2 / 2)
    g /= math.sqrt(np.trapezoid(g**2, dx=dx))
    fidelity = np.trapezoid(band.w * g, dx=dx) ** 2
    assert fidelity > 0.999


@pytest.mark.parametrize("v0,m", [(-100.0, 0), (-100.0, 1), (-200.0, 2), (-300.0, 4), (-400.0, 5)])
def test_bound_wannier_is_real_and_consistent(v0, m):
    band = build_wannier(LatticeProblem(v0), m)
    assert band.bound
    assert band.max_imag < 1e-8
    assert abs(band.bunching_realspace - band.bunching) < 1e-6
    dx = band.x[1] - band.x[0]
    assert np.trapezoid(band.w**2, dx=dx) == pytest.approx(1.0, abs=1e-12)


def test_wannier_parity_and_localization():
    even = build_wannier(LatticeProblem(-50.0), 2)
    odd = build_wannier(LatticeProblem(-50.0), 1)
    np.testing.assert_allclose(even.w, even.w[::-1], atol=1e-10)
    np.testing.assert_allclose(odd.w, -odd.w[::-1], atol=1e-10)
    assert wannier_spread(even) < 1.0
    assert wannier_spread(odd) < 1.0


def test_odd_gauges_agree():
    a = build_wannier(LatticeProblem(-80.0), 3, gauge="periodic")
    b = build_wannier(LatticeProblem(-80.0), 3, gauge="bloch")
    assert wannier_spread(a) == pytest.approx(wannier_spread(b), rel=1e-8)


def test_wannier_rejects_zero_depth():
    with pytest.raises(ValueError):
        build_wannier(LatticeProblem(0.0), 0)


def test_cutoff_check_raises_with_suggestion():
    with pytest.raises(ConvergenceError) as err:
        solve_bloch(LatticeProblem(-500.0, 6, 16), 8)
    assert err.value.suggested_cutoff == 12


def test_band_table_shapes():
    table = band_table(LatticeProblem(-20.0, 16, 32), 5)
    assert table["energies"].shape == (6, 32)
    assert table["bound"][0] and not table["bound"][5]
    assert np.all(np.diff(table["band_avg_energy"]) > 0)


def test_repulsive_depth_rejected():
    with pytest.raises(ValueError):
        LatticeProblem(1.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(-300.0, -0.5))
def test_bands_ordered_and_bunching_bounded(v0):
    sols = solve_bloch(LatticeProblem(v0, 24, 16), 6, check_cutoff=False)
    e = np.array([s.energies for s in sols])
    assert np.all(np.diff(e, axis=0) >= -1e-9)
    for s in sols:
        assert 0.0 <= s.bunching <= 1.0
    # the lowest band is attracted to the antinodes
    assert sols[0].bunching > 0.5


def test_ground_bunching_grows_with_depth():
    depths = [-1.0, -5.0, -20.0, -80.0, -300.0]
    b = [bunching_parameter(LatticeProblem(v), 0) for v in depths]
    assert np.all(np.diff(b) > 0)


def test_harmonic_bunching_values():
    assert harmonic_bunching(0, -10.0, 10.0) == pytest.approx(0.95, abs=1e-15)
    assert harmonic_bunching(2, -10.0, 10.0) == pytest.approx(0.75, abs=1e-15)
    assert harmonic_bunching(5, -10.0, 1e12) == pytest.approx(1.0, abs=1e-5)


def test_harmonic_bunching_clamps_and_flags():
    value, valid = harmonic_bunching_flagged(3, -10.0, 0.05)
    assert value == 0.0 and not valid
    with pytest.raises(ValueError):
        harmonic_bunching(0, -10.0, 0.0)


@pytest.mark.parametrize("depth", [100.0, 200.0, 400.0])
def test_ground_band_approaches_oscillator(depth):
    b0 = bunching_parameter(LatticeProblem(-depth), 0)
    assert abs(b0 - harmonic_bunching(0, -1.0, depth)) < 5 / math.sqrt(depth)
