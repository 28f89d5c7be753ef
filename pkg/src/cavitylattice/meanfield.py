"""Semiclassical model: self-consistent photon numbers and their stability.

With the particle in a band state of the lattice U0 n cos^2(x), the cavity
field sees the shifted detuning Delta_eff = Delta_C - U0 b(n), and the
steady-state photon number must reproduce itself:

    n = eta^2 / (kappa^2 + Delta_eff(n)^2).

b(n) is either the harmonic-oscillator estimate for level n_ho or the
Wannier bunching parameter b_m of band m at depth U0 n.  Roots are found by
bracketing F(n) = eta^2 / (kappa^2 + Delta_eff^2) - n on a grid over
(1e-6, eta^2/kappa^2] and refining each bracket.
"""
from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq, minimize_scalar

from .bandstructure import DEFAULT_CUTOFF, LatticeProblem, harmonic_bunching, zone_averages
from .io import write_csv, write_json
from .model import ModelParams, apply_cos2

N_MIN = 1e-6
FD_RELATIVE_STEP = 1e-3
MARGINAL_BAND = 1e-6


class CoarseGridWarning(UserWarning):
    """The tabulated b(n) and the exact band solve disagree near a root."""


class MeanFieldIntegrationError(RuntimeError):
    def __init__(self, message: str, time: float, alpha: complex, psi: np.ndarray):
        super().__init__(message)
        self.time = time
        self.alpha = alpha
        self.psi = psi


# bunching models --------------------------------------------------------------

class BandCache:
    """Tabulated b_m and zone-averaged energies versus photon number.

    Bands 0..max_band are solved on a grid uniform in sqrt(|U0| n) (b varies
    like 1/sqrt(depth) in deep lattices) and interpolated with monotone
    cubic splines.  :meth:`exact` does a full solve and memoizes it; a lock
    serializes insertions so concurrent readers are safe.
    """

    def __init__(self, u0: float, n_max: float, max_band: int = 8, n_points: int = 241,
                 q_nodes: int = 64, exact_q_nodes: int = 128, cutoff: int = DEFAULT_CUTOFF):
        if not u0 < 0:
            raise ValueError("band models need an attractive lattice, U0 < 0")
        if n_max <= 0:
            raise ValueError("n_max must be positive")
        self.u0 = float(u0)
        self.n_max = float(n_max)
        self.max_band = int(max_band)
        self.cutoff = int(cutoff)
        self.q_nodes = int(q_nodes)
        self.exact_q_nodes = int(exact_q_nodes)
        s_top = math.sqrt(abs(self.u0) * self.n_max)
        self.s_grid = np.linspace(0.0, s_top, n_points)
        b = np.zeros((self.max_band + 1, n_points))
        e = np.zeros((self.max_band + 1, n_points))
        for i, s in enumerate(self.s_grid):
            problem = LatticeProblem(-(s**2), cutoff, q_nodes)
            e[:, i], b[:, i] = zone_averages(problem, self.max_band, check_cutoff=(i == n_points - 1))
        self.b_table = b
        self.e_table = e
        self._b_interp = [PchipInterpolator(self.s_grid, b[m]) for m in range(self.max_band + 1)]
        self._e_interp = [PchipInterpolator(self.s_grid, e[m]) for m in range(self.max_band + 1)]
        self._exact: dict[tuple[int, float], tuple[float, float]] = {}
        self._lock = threading.Lock()

    def _s(self, n):
        return np.sqrt(abs(self.u0) * np.asarray(n, dtype=float))

    def _check_band(self, m: int) -> None:
        if not 0 <= m <= self.max_band:
            raise ValueError(f"band {m} outside the cached range 0..{self.max_band}")

    def bunching(self, m: int, n):
        self._check_band(m)
        return self._b_interp[m](self._s(n))

    def band_energy(self, m: int, n):
        self._check_band(m)
        return self._e_interp[m](self._s(n))

    def exact(self, m: int, n: float) -> tuple[float, float]:
        """(b_m, zone-averaged energy) from a full solve at depth U0 n."""
        self._check_band(m)
        key = (m, float(n))
        hit = self._exact.get(key)
        if hit is not None:
            return hit
        problem = LatticeProblem(self.u0 * float(n), self.cutoff, self.exact_q_nodes)
        avg, b = zone_averages(problem, m)
        value = (float(b[m]), float(avg[m]))
        with self._lock:
            self._exact.setdefault(key, value)
        return value

    def exact_bunching(self, m: int, n: float) -> float:
        return self.exact(m, n)[0]


_CACHES: dict[tuple, BandCache] = {}
_CACHES_LOCK = threading.Lock()


def shared_cache(u0: float, n_max: float, max_band: int = 8, **kwargs) -> BandCache:
    """Process-wide cache keyed by its construction arguments."""
    key = (float(u0), float(n_max), int(max_band), tuple(sorted(kwargs.items())))
    with _CACHES_LOCK:
        cache = _CACHES.get(key)
    if cache is None:
        cache = BandCache(u0, n_max, max_band, **kwargs)
        with _CACHES_LOCK:
            cache = _CACHES.setdefault(key, cache)
    return cache


@dataclass(frozen=True)
class HarmonicModel:
    """b(n) = 1 - (2 n_ho + 1) / (2 sqrt(|U0| n)), unclamped.

    Root finding needs the plain formula; :func:`harmonic_bunching` is the
    clamped public version.
    """

    n_ho: int
    u0: float
    kind: str = "harmonic"

    @property
    def index(self) -> int:
        return self.n_ho

    def __call__(self, n: float) -> float:
        if self.u0 == 0:
            # no lattice: b never enters the physics, report the clamped value
            return harmonic_bunching(self.n_ho, self.u0, n)
        return 1.0 - (2 * self.n_ho + 1) / (2.0 * math.sqrt(abs(self.u0) * n))

    def raw(self, n: float) -> float:
        return self(n)

    def exact(self, n: float) -> float:
        return self(n)

    def bound(self, n: float) -> bool | None:
        return None


@dataclass(frozen=True)
class WannierModel:
    """b(n) = b_m at depth U0 n, read from a :class:`BandCache`."""

    m: int
    cache: BandCache = field(repr=False)
    kind: str = "wannier"

    @property
    def index(self) -> int:
        return self.m

    @property
    def u0(self) -> float:
        return self.cache.u0

    def __call__(self, n: float) -> float:
        return float(self.cache.bunching(self.m, n))

    def raw(self, n: float) -> float:
        return self(n)

    def exact(self, n: float) -> float:
        return self.cache.exact_bunching(self.m, n)

    def bound(self, n: float) -> bool:
        return self.cache.exact(self.m, n)[1] < 0.0


# basic relations ---------------------------------------------------------------

def effective_detuning(params: ModelParams, b: float) -> float:
    return params.delta_c - params.u0 * b


def lorentzian(params: ModelParams, delta_eff):
    return params.eta**2 / (params.kappa**2 + np.square(delta_eff))


def field_steady_state(params: ModelParams, b: float) -> complex:
    """Stationary field amplitude -eta / (i Delta_eff - kappa)."""
    delta_eff = effective_detuning(params, b)
    return complex(-params.eta / (1j * delta_eff - params.kappa))


def derivative(fun: Callable[[float], float], n: float, rel_step: float = FD_RELATIVE_STEP) -> tuple[float, float]:
    """Central difference with step rel_step * n.

    Returns the derivative and, as a Richardson-style check, how much it
    changes when the step is halved.
    """
    h = rel_step * n
    if not h > 1e-14 or n - h <= 0:
        raise ValueError(f"finite-difference step {h:.3e} is not usable at n={n:.3e}")
    d1 = (fun(n + h) - fun(n - h)) / (2 * h)
    h2 = 0.5 * h
    d2 = (fun(n + h2) - fun(n - h2)) / (2 * h2)
    return d1, abs(d2 - d1)


def lorentzian_slope(params: ModelParams, b_of_n: Callable[[float], float], n: float,
                     d_delta_eff: float | None = None) -> float:
    """d/dn of eta^2 / (kappa^2 + Delta_eff(n)^2) at n."""
    delta_eff = effective_detuning(params, b_of_n(n))
    if d_delta_eff is None:
        d_delta_eff = -params.u0 * derivative(b_of_n, n)[0]
    return -2.0 * params.eta**2 * delta_eff * d_delta_eff / (params.kappa**2 + delta_eff**2) ** 2


# branches ------------------------------------------------------------------------

@dataclass(frozen=True)
class SelfConsistentBranch:
    """A self-consistent photon number for one band (or oscillator level)."""

    m: int
    model: str
    delta_c: float
    n_mean: float
    b: float
    delta_eff: float
    stable: bool | None
    slope: float
    marginal: bool = False
    bound: bool | None = None

    def to_dict(self) -> dict:
        return {
            "model": self.model, "m": self.m, "delta_c": self.delta_c, "n": self.n_mean,
            "b": self.b, "delta_eff": self.delta_eff, "stable": self.stable,
            "slope": self.slope, "marginal": self.marginal, "bound": self.bound,
        }


def residual(params: ModelParams, branch: SelfConsistentBranch) -> float:
    """|eta^2/(kappa^2 + Delta_eff^2) - n| at the branch."""
    return abs(float(lorentzian(params, branch.delta_eff)) - branch.n_mean)


def _n_grid(params: ModelParams, points: int) -> np.ndarray:
    n_top = params.eta**2 / params.kappa**2
    if n_top <= N_MIN:
        return np.zeros(0)
    log_part = np.geomspace(N_MIN, n_top, points)
    lin_part = np.linspace(N_MIN, n_top, points)
    return np.unique(np.concatenate([log_part, lin_part]))


def _make_branch(params: ModelParams, model, n: float, marginal: bool = False) -> SelfConsistentBranch:
    b = model.exact(n)
    delta_eff = effective_detuning(params, b)
    try:
        d_delta = -params.u0 * derivative(model.exact if model.kind == "wannier" else model.raw, n)[0]
        slope = lorentzian_slope(params, model.exact, n, d_delta)
    except ValueError:
        slope = float("nan")
    if marginal or abs(slope - 1.0) <= MARGINAL_BAND:
        stable, marginal = None, True
    else:
        stable = bool(slope < 1.0)
    return SelfConsistentBranch(
        m=model.index, model=model.kind, delta_c=params.delta_c, n_mean=float(n), b=float(b),
        delta_eff=float(delta_eff), stable=stable, slope=float(slope), marginal=marginal,
        bound=model.bound(n),
    )


def _roots(params: ModelParams, model, grid_points: int, refine_exact: bool) -> list[SelfConsistentBranch]:
    grid = _n_grid(params, grid_points)
    if grid.size == 0:
        return []
    approx = np.array([model(n) for n in grid]) if model.kind == "harmonic" else model.cache.bunching(model.m, grid)
    f_grid = lorentzian(params, params.delta_c - params.u0 * approx) - grid

    def f_fast(n):
        return float(lorentzian(params, effective_detuning(params, model(n)))) - n

    def f_exact(n):
        return float(lorentzian(params, effective_detuning(params, model.exact(n)))) - n

    brackets = []
    for i in range(grid.size - 1):
        fa, fb = f_grid[i], f_grid[i + 1]
        if fa == 0.0:
            brackets.append((grid[i], grid[i], False))
        elif fa * fb < 0:
            brackets.append((grid[i], grid[i + 1], False))
    if f_grid[-1] == 0.0:
        brackets.append((grid[-1], grid[-1], False))
    # local extrema of F between grid points may hide a pair of roots or a tangency
    for i in range(1, grid.size - 1):
        fa, fm, fb = f_grid[i - 1], f_grid[i], f_grid[i + 1]
        is_min = fm < fa and fm < fb and fm > 0
        is_max = fm > fa and fm > fb and fm < 0
        if not (is_min or is_max):
            continue
        sign = 1.0 if is_min else -1.0
        res = minimize_scalar(lambda n: sign * f_fast(n), bounds=(grid[i - 1], grid[i + 1]),
                              method="bounded", options={"xatol": 1e-12 * grid[i + 1]})
        n_ext, f_ext = res.x, f_fast(res.x)
        if sign * f_ext < 0:
            brackets.append((grid[i - 1], n_ext, False))
            brackets.append((n_ext, grid[i + 1], False))
        elif abs(f_ext) <= 1e-10 * max(n_ext, 1.0):
            brackets.append((n_ext, n_ext, True))

    branches = []
    for lo, hi, tangent in brackets:
        if lo == hi:
            n_root = lo
        else:
            fun = f_fast
            if refine_exact and model.kind == "wannier":
                if f_exact(lo) * f_exact(hi) < 0:
                    fun = f_exact
                else:
                    warnings.warn(
                        f"band {model.m}: tabulated and exact b(n) disagree near n~{0.5 * (lo + hi):.4g}; "
                        "refine the cache grid", CoarseGridWarning, stacklevel=3)
            n_root = brentq(fun, lo, hi, xtol=1e-14, rtol=1e-12, maxiter=200)
        if refine_exact or model.kind == "harmonic":
            branch = _make_branch(params, model, n_root, marginal=tangent)
        else:
            branch = _make_fast_branch(params, model, n_root, tangent)
        branches.append(branch)
    branches.sort(key=lambda br: br.n_mean)
    # a bracket found twice (sign change next to a refined extremum) collapses here
    unique: list[SelfConsistentBranch] = []
    for br in branches:
        if unique and abs(br.n_mean - unique[-1].n_mean) <= 1e-9 * max(1.0, br.n_mean):
            continue
        unique.append(br)
    return unique


def _make_fast_branch(params: ModelParams, model, n: float, marginal: bool) -> SelfConsistentBranch:
    b = model(n)
    delta_eff = effective_detuning(params, b)
    d_delta = -params.u0 * derivative(model, n)[0]
    slope = lorentzian_slope(params, model, n, d_delta)
    if marginal or abs(slope - 1.0) <= MARGINAL_BAND:
        stable, marginal = None, True
    else:
        stable = bool(slope < 1.0)
    return SelfConsistentBranch(model.index, model.kind, params.delta_c, float(n), float(b),
                                float(delta_eff), stable, float(slope), marginal, None)


def solve_selfconsistent_harmonic(n_ho: int, params: ModelParams, grid_points: int = 2000) -> list[SelfConsistentBranch]:
    """All roots for oscillator level n_ho, sorted by photon number.

    The unclamped oscillator formula is used, so at very small n the
    reported b can be negative; clamping would create spurious roots.
    """
    if params.u0 == 0:
        raise ValueError("the harmonic model needs U0 != 0")
    return _roots(params, HarmonicModel(n_ho, params.u0), grid_points, refine_exact=True)


def solve_selfconsistent_wannier(m: int, params: ModelParams, cache: BandCache | None = None,
                                 grid_points: int = 2000, refine_exact: bool = True) -> list[SelfConsistentBranch]:
    """All roots for band m, sorted by photon number.

    Brackets come from the tabulated b_m(n); with ``refine_exact`` each root
    is polished with full band solves and classified with an exact
    finite-difference derivative.  Without it, everything uses the
    interpolant, which is much faster for large sweeps.
    """
    n_top = params.eta**2 / params.kappa**2
    if cache is None:
        cache = shared_cache(params.u0, max(n_top, 1.0), max(m, 8))
    if cache.u0 != params.u0:
        raise ValueError("cache was built for a different U0")
    if cache.n_max < n_top * (1 - 1e-12):
        raise ValueError(f"cache covers n <= {cache.n_max}, need {n_top}")
    return _roots(params, WannierModel(m, cache), grid_points, refine_exact)


# contours -------------------------------------------------------------------------

@dataclass(frozen=True)
class ContourPoint:
    delta_c: float
    n_mean: float
    sign: int
    b: float
    slope: float
    stable: bool | None


def trace_contour(index: int, model: str, eta: float, u0: float, kappa: float, n_samples,
                  cache: BandCache | None = None) -> list[ContourPoint]:
    """Self-consistent (Delta_C, n) pairs from the explicit inverse.

    For each n <= eta^2/kappa^2, Delta_C = U0 b(n) +- sqrt(eta^2/n - kappa^2);
    points with larger n are skipped.  ``n_samples`` is an array of photon
    numbers or an integer count of log-spaced samples.
    """
    n_top = eta**2 / kappa**2
    if np.isscalar(n_samples):
        ns = np.geomspace(max(N_MIN, n_top * 1e-4), n_top, int(n_samples))
    else:
        ns = np.asarray(n_samples, dtype=float)
    ns = ns[(ns > 0) & (ns <= n_top * (1 + 1e-12))]
    if model == "harmonic":
        fun = HarmonicModel(index, u0)
        b_exact, b_deriv = fun.exact, fun.raw
    elif model == "wannier":
        if cache is None:
            cache = shared_cache(u0, max(n_top, 1.0), max(index, 8))
        fun = WannierModel(index, cache)
        b_exact, b_deriv = fun.exact, fun.exact
    else:
        raise ValueError(f"unknown model {model!r}")
    points = []
    for n in ns:
        b = b_exact(n)
        root = math.sqrt(max(eta**2 / n - kappa**2, 0.0))
        try:
            db = derivative(b_deriv, n)[0]
        except ValueError:
            db = float("nan")
        for sign in (+1, -1):
            delta_c = u0 * b + sign * root
            delta_eff = delta_c - u0 * b
            slope = -2.0 * eta**2 * delta_eff * (-u0 * db) / (kappa**2 + delta_eff**2) ** 2
            if not math.isfinite(slope) or abs(slope - 1.0) <= MARGINAL_BAND:
                stable = None
            else:
                stable = bool(slope < 1.0)
            points.append(ContourPoint(float(delta_c), float(n), sign, float(b), float(slope), stable))
    return points


# stability -----------------------------------------------------------------------

@dataclass(frozen=True)
class StabilityMatrix:
    matrix: np.ndarray
    n_ss: float
    d_delta_eff_dn: float
    alpha_ss: complex
    delta_eff: float
    fd_error: float = 0.0

    @property
    def trace(self) -> complex:
        return self.matrix[0, 0] + self.matrix[1, 1]

    @property
    def determinant(self) -> complex:
        a = self.matrix
        return a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]


def stability_matrix(params: ModelParams, branch: SelfConsistentBranch,
                     b_of_n: Callable[[float], float], d_delta_eff_dn: float | None = None) -> StabilityMatrix:
    """Linearization of the field equation around a self-consistent point.

    A = diag(i D - kappa, -i D - kappa) + i d [[n, alpha^2], [-alpha*^2, -n]]
    with D = Delta_eff and d = dDelta_eff/dn = -U0 db/dn (central
    difference unless ``d_delta_eff_dn`` is given).  The lower-right entry
    is built as the conjugate of the upper-left one so the trace is -2 kappa
    exactly.
    """
    n = branch.n_mean
    fd_err = 0.0
    if d_delta_eff_dn is None:
        db, fd_err = derivative(b_of_n, n)
        d_delta_eff_dn = -params.u0 * db
        fd_err *= abs(params.u0)
    d = float(d_delta_eff_dn)
    delta = branch.delta_eff
    alpha = field_steady_state(params, branch.b)
    a00 = complex(-params.kappa, delta + d * n)
    mat = np.array([
        [a00, 1j * d * alpha**2],
        [-1j * d * np.conj(alpha) ** 2, np.conj(a00)],
    ])
    return StabilityMatrix(mat, n, d, alpha, delta, fd_err)


@dataclass(frozen=True)
class StabilityReport:
    stable: bool | None
    marginal: bool
    consistent: bool
    by_eigenvalues: bool
    by_determinant: bool
    by_slope: bool
    eigenvalues: np.ndarray
    determinant: float
    slope: float


def classify_stability(a: StabilityMatrix, params: ModelParams, branch: SelfConsistentBranch | None = None) -> StabilityReport:
    """Three equivalent verdicts: eigenvalues, det(A) > 0 (trace < 0), slope < 1.

    Within ``MARGINAL_BAND`` of slope = 1 no verdict is given.  Elsewhere a
    disagreement marks the report inconsistent and withholds the verdict.
    """
    eig = np.linalg.eigvals(a.matrix)
    det = a.determinant
    delta = a.delta_eff
    slope = -2.0 * params.eta**2 * delta * a.d_delta_eff_dn / (params.kappa**2 + delta**2) ** 2
    by_eig = bool(np.all(eig.real < 0))
    by_det = bool(det.real > 0 and a.trace.real < 0)
    by_slope = bool(slope < 1.0)
    marginal = abs(slope - 1.0) <= MARGINAL_BAND
    consistent = by_eig == by_det == by_slope
    if marginal or not consistent:
        stable = None
    else:
        stable = by_slope
    return StabilityReport(stable, marginal, consistent or marginal, by_eig, by_det, by_slope,
                           eig, float(det.real), float(slope))


# coupled dynamics ---------------------------------------------------------------------

def particle_hamiltonian(j_max: int, depth: float) -> np.ndarray:
    """p^2 + depth cos^2(x) on the momentum basis j = -j_max..j_max."""
    js = np.arange(-j_max, j_max + 1)
    c = 0.5 * np.eye(js.size) + 0.25 * (np.eye(js.size, k=2) + np.eye(js.size, k=-2))
    return np.diag(js.astype(float) ** 2) + depth * c


def stationary_particle_state(j_max: int, depth: float, m: int) -> np.ndarray:
    """Band-m eigenstate of p^2 + depth cos^2 at q = 0 (even momenta only).

    The integer momentum basis holds quasimomentum q = 0 on even j and
    q = 1 on odd j; this returns the m-th level of the even sector.
    """
    js = np.arange(-j_max, j_max + 1)
    even = np.flatnonzero(js % 2 == 0)
    h = particle_hamiltonian(j_max, depth)[np.ix_(even, even)]
    _, vecs = np.linalg.eigh(h)
    psi = np.zeros(js.size, dtype=complex)
    v = vecs[:, m]
    psi[even] = v if v[np.argmax(np.abs(v))] > 0 else -v
    return psi


def particle_bunching(psi: np.ndarray) -> float:
    return float(np.vdot(psi, apply_cos2(psi[None, :], 2)[0]).real)


@dataclass(frozen=True)
class MeanFieldState:
    alpha: complex
    psi: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=complex)
        if psi.ndim != 1 or psi.size % 2 == 0:
            raise ValueError("psi must be a 1-D array over j = -j_max..j_max")
        if abs(np.linalg.norm(psi) - 1.0) > 1e-10:
            raise ValueError("particle wavefunction must be normalized")
        object.__setattr__(self, "psi", psi)

    @property
    def j_max(self) -> int:
        return (self.psi.size - 1) // 2


@dataclass
class MeanFieldSeries:
    times: np.ndarray
    alpha: np.ndarray
    psi: np.ndarray = field(repr=False)
    bunching: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_mean(self) -> np.ndarray:
        return np.abs(self.alpha) ** 2

    def state(self, i: int) -> MeanFieldState:
        return MeanFieldState(complex(self.alpha[i]), self.psi[i] / np.linalg.norm(self.psi[i]), float(self.times[i]))


def integrate_meanfield(initial: MeanFieldState, params: ModelParams, t_final: float, sample_dt: float,
                        rtol: float = 1e-8, atol: float = 1e-10) -> MeanFieldSeries:
    """Co-evolve the field amplitude and the particle wavefunction.

    d alpha/dt = [i (Delta_C - U0 b) - kappa] alpha + eta with b = <cos^2>,
    i d psi/dt = (p^2 + U0 |alpha|^2 cos^2) psi.
    """
    j_max = initial.j_max
    js2 = np.arange(-j_max, j_max + 1, dtype=float) ** 2

    def rhs(_t, y):
        alpha = y[0]
        psi = y[1:]
        c_psi = apply_cos2(psi[None, :], 2)[0]
        b = np.vdot(psi, c_psi).real
        d_alpha = (1j * (params.delta_c - params.u0 * b) - params.kappa) * alpha + params.eta
        d_psi = -1j * (js2 * psi + params.u0 * abs(alpha) ** 2 * c_psi)
        return np.concatenate(([d_alpha], d_psi))

    count = int(math.floor(t_final / sample_dt + 1e-9))
    times = sample_dt * np.arange(count + 1)
    y0 = np.concatenate(([complex(initial.alpha)], initial.psi))
    sol = solve_ivp(rhs, (initial.time, initial.time + times[-1]), y0, method="DOP853",
                    t_eval=initial.time + times, rtol=rtol, atol=atol)
    if not sol.success:
        last = sol.y[:, -1] if sol.y.size else y0
        raise MeanFieldIntegrationError(sol.message, float(sol.t[-1]) if sol.t.size else initial.time,
                                        complex(last[0]), last[1:])
    alpha = sol.y[0]
    psi = sol.y[1:].T
    b = np.array([particle_bunching(p) for p in psi])
    return MeanFieldSeries(sol.t, alpha, psi, b)


# heating condition ------------------------------------------------------------------

@dataclass(frozen=True)
class HeatingResult:
    heats: bool
    delta_eff_m: float
    delta_eff_m2: float
    marginal: bool
    upper_bound: bool

    def __bool__(self) -> bool:
        return self.heats


def heating_condition(m: int, params: ModelParams, n: float, cache: BandCache | None = None) -> HeatingResult:
    """Whether Delta_eff,m > -Delta_eff,m+2 at photon number n.

    b_m and b_{m+2} come from zone averages at depth U0 n, which are defined
    for bound and unbound bands alike; ``upper_bound`` records whether band
    m+2 is bound.  Exact equality is reported as marginal and not heating.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if cache is not None:
        b_m, _ = cache.exact(m, n)
        b_m2, e_m2 = cache.exact(m + 2, n)
    else:
        if params.u0 > 0:
            raise ValueError("band models need an attractive lattice, U0 <= 0")
        avg, b = zone_averages(LatticeProblem(params.u0 * n), m + 2)
        b_m, b_m2, e_m2 = b[m], b[m + 2], avg[m + 2]
    d_m = effective_detuning(params, b_m)
    d_m2 = effective_detuning(params, b_m2)
    gap = d_m + d_m2
    marginal = abs(gap) <= 1e-12 * max(1.0, abs(d_m), abs(d_m2))
    return HeatingResult(bool(gap > 0 and not marginal), float(d_m), float(d_m2), bool(marginal), bool(e_m2 < 0))


# export ------------------------------------------------------------------------------

BRANCH_COLUMNS = ["model", "m", "delta_c", "n", "b", "delta_eff", "stable", "slope", "marginal", "bound"]


def write_branches_csv(path, branches: Sequence[SelfConsistentBranch]):
    rows = ([br.to_dict()[c] for c in BRANCH_COLUMNS] for br in branches)
    return write_csv(path, BRANCH_COLUMNS, rows)


def write_branches_json(path, branches: Sequence[SelfConsistentBranch]):
    return write_json(path, [br.to_dict() for br in branches])


def write_contour_csv(path, points: Sequence[ContourPoint]):
    rows = ((p.delta_c, p.n_mean, p.sign, p.b, p.slope, p.stable) for p in points)
    return write_csv(path, ["delta_c", "n", "sign", "b", "slope", "stable"], rows)
