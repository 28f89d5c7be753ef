"""Bloch bands, Wannier functions and bunching parameters of the cos^2 lattice.

The potential is V(x) = V0 cos^2(x) with V0 <= 0 (units k_R = 1, so the
lattice period is pi and reciprocal vectors are even integers).  A Bloch
state with quasimomentum q in (-1, 1] is expanded as

    psi_q(x) = sum_l c_l exp(i (q + 2 l) x),   l = -L..L,

which turns the Schroedinger equation into a real symmetric tridiagonal
eigenproblem with diagonal (q + 2 l)^2 + V0/2 and off-diagonal V0/4.  The
energy zero sits at the top of the potential, so a band is called bound
when its Brillouin-zone averaged energy is negative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .io import write_csv, write_json

DEFAULT_CUTOFF = 32
DEFAULT_NQ = 128
DEFAULT_WINDOW = 20
CUTOFF_TOLERANCE = 1e-10


class ConvergenceError(RuntimeError):
    """The plane-wave cutoff is too small for the requested bands."""

    def __init__(self, message: str, suggested_cutoff: int):
        super().__init__(message)
        self.suggested_cutoff = suggested_cutoff


class PhaseConventionError(RuntimeError):
    """No usable reference value for fixing the Bloch phases."""


def tanh_sinh_rule(count: int, t_max: float = 3.2) -> tuple[np.ndarray, np.ndarray]:
    """Tanh-sinh nodes on (0, 1) with normalized weights."""
    t = np.linspace(-t_max, t_max, count)
    s = 0.5 * math.pi * np.sinh(t)
    nodes = 0.5 * (np.tanh(s) + 1.0)
    weights = np.cosh(t) / np.cosh(s) ** 2
    return nodes, weights / weights.sum()


@dataclass(frozen=True)
class LatticeProblem:
    """Lattice depth and discretization.

    ``depth_v0`` is U0 <n>; it must be zero or negative.  Quasimomenta are
    ``q_k = -1 + 2 (k + 1) / N_q`` so the grid contains q = 0 and q = 1.
    """

    depth_v0: float
    plane_wave_cutoff: int = DEFAULT_CUTOFF
    q_grid_size: int = DEFAULT_NQ

    def __post_init__(self):
        if self.depth_v0 > 0:
            raise ValueError(f"depth_v0 must be <= 0, got {self.depth_v0}")
        if self.plane_wave_cutoff < 1:
            raise ValueError("plane_wave_cutoff must be >= 1")
        if self.q_grid_size < 2 or self.q_grid_size % 2:
            raise ValueError("q_grid_size must be an even number >= 2")

    @property
    def q_grid(self) -> np.ndarray:
        n = self.q_grid_size
        return -1.0 + 2.0 * np.arange(1, n + 1) / n

    def quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        """Nodes in (0, 1) and weights summing to 1 for Brillouin-zone averages.

        Averages over (-1, 1] equal averages over [0, 1] because E(q) and
        <cos^2>(q) are even in q.  Avoided crossings sit at q = 0 and q = 1,
        so a tanh-sinh rule (nodes clustered at both ends) is used instead
        of the uniform grid; see :func:`tanh_sinh_rule`.
        """
        return tanh_sinh_rule(self.q_grid_size)

    @property
    def orders(self) -> np.ndarray:
        big_l = self.plane_wave_cutoff
        return np.arange(-big_l, big_l + 1)

    def refined(self, cutoff_factor: int = 2, q_factor: int = 2) -> "LatticeProblem":
        return LatticeProblem(self.depth_v0, self.plane_wave_cutoff * cutoff_factor,
                              self.q_grid_size * q_factor)


@dataclass(frozen=True)
class BlochSolution:
    """One band on the uniform q grid.

    ``coefficients[k]`` is the real unit vector c_l at q_k.  The zone
    averages ``band_avg_energy`` and ``bunching`` come from the quadrature
    rule of the problem, not from the uniform grid.
    """

    m: int
    q: np.ndarray
    energies: np.ndarray
    coefficients: np.ndarray = field(repr=False)
    band_avg_energy: float = float("nan")
    bunching: float = float("nan")
    phase_convention: str = "real-eigenvector"

    @property
    def bound(self) -> bool:
        return self.band_avg_energy < 0.0


@dataclass(frozen=True)
class WannierBand:
    m: int
    bunching: float
    band_avg_energy: float
    bound: bool
    x: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    bunching_realspace: float = float("nan")
    max_imag: float = 0.0
    phase_convention: str = ""

    def summary(self) -> dict:
        return {"m": self.m, "b_m": self.bunching, "band_avg_energy": self.band_avg_energy,
                "bound": self.bound}


def _tridiagonal(problem: LatticeProblem, q: float) -> tuple[np.ndarray, np.ndarray]:
    orders = problem.orders
    v0 = problem.depth_v0
    diag = (q + 2.0 * orders) ** 2 + 0.5 * v0
    off = np.full(orders.size - 1, 0.25 * v0)
    return diag, off


def _solve_at(problem: LatticeProblem, q_values: np.ndarray, max_band: int) -> tuple[np.ndarray, np.ndarray]:
    """Energies (N, M) and coefficient vectors (N, M, 2L+1) for bands 0..max_band."""
    size = problem.orders.size
    energies = np.zeros((q_values.size, max_band + 1))
    vectors = np.zeros((q_values.size, max_band + 1, size))
    for k, q in enumerate(q_values):
        diag, off = _tridiagonal(problem, q)
        if problem.depth_v0 == 0.0:
            # decoupled plane waves
            order = np.argsort(diag, kind="stable")[: max_band + 1]
            energies[k] = diag[order]
            vectors[k] = np.eye(size)[order]
            continue
        vals, vecs = eigh_tridiagonal(diag, off, select="i", select_range=(0, max_band))
        energies[k] = vals
        vectors[k] = vecs.T
    return energies, vectors


def _check_bands(problem: LatticeProblem, max_band: int) -> None:
    size = problem.orders.size
    if max_band < 0:
        raise ValueError("max_band must be >= 0")
    if max_band >= size - 1:
        raise ValueError(f"max_band={max_band} needs a cutoff L > {max_band // 2 + 1}")


def _check_cutoff(problem: LatticeProblem, q_values: np.ndarray, energies: np.ndarray, max_band: int) -> None:
    bigger = LatticeProblem(problem.depth_v0, problem.plane_wave_cutoff + 4, problem.q_grid_size)
    e_big, _ = _solve_at(bigger, q_values, max_band)
    drift = float(np.max(np.abs(e_big - energies)))
    if drift > CUTOFF_TOLERANCE:
        suggestion = 2 * problem.plane_wave_cutoff
        raise ConvergenceError(
            f"band energies change by {drift:.2e} when the cutoff grows to L+4; try L={suggestion}",
            suggestion,
        )


def _cos2_expectation(coefficients: np.ndarray) -> np.ndarray:
    """<u_q|cos^2 x|u_q> = 1/2 + 1/2 Re sum_l c_l* c_{l+1} along the last axis."""
    c = coefficients
    return 0.5 + 0.5 * np.real(np.sum(np.conj(c[..., :-1]) * c[..., 1:], axis=-1))


def zone_averages(problem: LatticeProblem, max_band: int, check_cutoff: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Zone-averaged energies and bunching parameters of bands 0..max_band.

    Only the quadrature nodes are solved, which makes this the cheap path
    for tabulating b_m against depth.
    """
    _check_bands(problem, max_band)
    nodes, weights = problem.quadrature()
    energies, vectors = _solve_at(problem, nodes, max_band)
    if check_cutoff:
        _check_cutoff(problem, nodes, energies, max_band)
    avg = weights @ energies
    if problem.depth_v0 == 0.0:
        return avg, np.full(max_band + 1, 0.5)
    b = weights @ _cos2_expectation(vectors)
    return avg, b


def solve_bloch(problem: LatticeProblem, max_band: int, check_cutoff: bool = True) -> list[BlochSolution]:
    """Bands 0..max_band on the quasimomentum grid, sorted by energy at each q.

    With ``check_cutoff`` every energy is recomputed at cutoff L + 4 and a
    :class:`ConvergenceError` is raised if any of them moves by more than
    1e-10.
    """
    _check_bands(problem, max_band)
    q_grid = problem.q_grid
    energies, vectors = _solve_at(problem, q_grid, max_band)
    if check_cutoff:
        _check_cutoff(problem, q_grid, energies, max_band)
    avg, b = zone_averages(problem, max_band, check_cutoff=False)
    return [
        BlochSolution(m=m, q=q_grid, energies=energies[:, m].copy(), coefficients=vectors[:, m, :].copy(),
                      band_avg_energy=float(avg[m]), bunching=float(b[m]))
        for m in range(max_band + 1)
    ]


def bunching_parameter(problem: LatticeProblem, m: int) -> float:
    """b_m as the Brillouin-zone average of <cos^2>; exactly 1/2 at zero depth."""
    if m < 0:
        raise ValueError("band index must be >= 0")
    if problem.depth_v0 == 0.0:
        return 0.5
    return float(zone_averages(problem, m)[1][m])


def band_table(problem: LatticeProblem, max_band: int, check_cutoff: bool = True) -> dict[str, np.ndarray]:
    """All bands at once: energies (M, N_q), zone-averaged energies, b_m and bound flags."""
    solutions = solve_bloch(problem, max_band, check_cutoff=check_cutoff)
    avg = np.array([s.band_avg_energy for s in solutions])
    return {
        "q": problem.q_grid,
        "energies": np.array([s.energies for s in solutions]),
        "band_avg_energy": avg,
        "bunching": np.array([s.bunching for s in solutions]),
        "bound": avg < 0.0,
    }


def _fix_phases(solution: BlochSolution, gauge: str) -> tuple[np.ndarray, str]:
    """Complex coefficient rows with the q-dependent phase fixed.

    Even bands: psi_q(0) real positive.  Odd bands: d/dx u_q(0) real positive
    (``gauge="periodic"``) or d/dx psi_q(0) real positive (``gauge="bloch"``).
    If the reference value vanishes at some q, the other quantity is used
    at that point and the tag records the fallback.
    """
    c = solution.coefficients.astype(complex)
    q = solution.q[:, None]
    two_l = 2.0 * (np.arange(c.shape[1]) - (c.shape[1] - 1) // 2)[None, :]
    value = c.sum(axis=1)                                   # psi_q(0) = u_q(0)
    if gauge == "periodic":
        slope = (1j * two_l * c).sum(axis=1)                # u_q'(0)
    elif gauge == "bloch":
        slope = (1j * (q + two_l) * c).sum(axis=1)          # psi_q'(0)
    else:
        raise ValueError(f"unknown gauge {gauge!r}")
    scale = np.sqrt((np.abs(c) ** 2).sum(axis=1))
    even = solution.m % 2 == 0
    primary, secondary = (value, slope) if even else (slope, value)
    tag = ("value" if even else f"{gauge}-slope") + "@0"
    ref = primary.copy()
    weak = np.abs(primary) < 1e-8 * scale
    if np.any(weak):
        if np.any(np.abs(secondary[weak]) < 1e-8 * scale[weak]):
            raise PhaseConventionError(f"band {solution.m}: value and slope both vanish at x=0")
        ref[weak] = secondary[weak]
        tag += "+fallback"
    phase = np.conj(ref) / np.abs(ref)
    return c * phase[:, None], tag


def build_wannier(problem: LatticeProblem, m: int, window_periods: int = DEFAULT_WINDOW,
                  points_per_period: int = 64, gauge: str = "periodic") -> WannierBand:
    """Wannier function of band m centred on the well at x = 0.

    w(x) is the q-average of the phase-fixed Bloch functions, sampled on a
    uniform grid covering ``window_periods`` lattice periods and normalized
    there.  The bunching parameter comes from the Brillouin-zone average;
    the real-space integral of w^2 cos^2 is stored as a cross-check.
    """
    if problem.depth_v0 == 0.0:
        raise ValueError("the Wannier construction is degenerate at zero depth")
    if window_periods < 1:
        raise ValueError("window_periods must be >= 1")
    solution = solve_bloch(problem, m)[m]
    coeff, tag = _fix_phases(solution, gauge)
    half = window_periods * math.pi / 2
    n_points = window_periods * points_per_period + 1
    x = np.linspace(-half, half, n_points)
    two_l = 2.0 * problem.orders
    plane = np.exp(1j * np.outer(two_l, x))                 # (2L+1, Nx)
    u = coeff @ plane                                       # u_q(x), (N_q, Nx)
    w_c = (np.exp(1j * np.outer(solution.q, x)) * u).mean(axis=0)
    dx = x[1] - x[0]
    norm = math.sqrt(np.trapezoid(np.abs(w_c) ** 2, dx=dx))
    w_c = w_c / norm
    max_imag = float(np.max(np.abs(w_c.imag)))
    w = w_c.real
    b_real = float(np.trapezoid(w**2 * np.cos(x) ** 2, dx=dx))
    return WannierBand(
        m=m,
        bunching=solution.bunching,
        band_avg_energy=solution.band_avg_energy,
        bound=solution.bound,
        x=x,
        w=w,
        bunching_realspace=b_real,
        max_imag=max_imag,
        phase_convention=tag,
    )


def wannier_spread(band: WannierBand) -> float:
    """Root-mean-square width of |w|^2 about x = 0."""
    dx = band.x[1] - band.x[0]
    return float(math.sqrt(np.trapezoid(band.x**2 * band.w**2, dx=dx)))


def harmonic_bunching_flagged(n_ho: int, u0: float, n_mean: float) -> tuple[float, bool]:
    """Deep-trap bunching 1 - (2 n_ho + 1) / (2 sqrt(|U0| n)) and a validity flag.

    The value is clamped to [0, 1]; the flag is False when clamping was
    needed or when |U0| n < 1, where the oscillator picture is meaningless.
    """
    if n_mean <= 0:
        raise ValueError(f"n_mean must be positive, got {n_mean}")
    if n_ho < 0:
        raise ValueError("n_ho must be >= 0")
    depth = abs(u0) * n_mean
    if depth == 0:
        return 0.0, False
    raw = 1.0 - (2 * n_ho + 1) / (2.0 * math.sqrt(depth))
    valid = raw >= 0.0 and depth >= 1.0
    return min(1.0, max(0.0, raw)), valid


def harmonic_bunching(n_ho: int, u0: float, n_mean: float) -> float:
    return harmonic_bunching_flagged(n_ho, u0, n_mean)[0]


# export ---------------------------------------------------------------------

def write_band_csv(path: str | Path, solution: BlochSolution) -> Path:
    return write_csv(path, ["q", "energy"], zip(solution.q, solution.energies))


def write_wannier_csv(path: str | Path, band: WannierBand) -> Path:
    return write_csv(path, ["x", "w"], zip(band.x, band.w))


def write_summary_json(path: str | Path, bands: list[WannierBand]) -> Path:
    return write_json(path, [b.summary() for b in bands])
