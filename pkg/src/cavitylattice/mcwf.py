"""Monte Carlo wave-function trajectories, ensembles and a density-matrix oracle.

A trajectory evolves an unnormalized state under H_eff = H - i kappa n until
its squared norm falls below a uniform random threshold, then applies the
photon-loss jump ``a`` and draws a new threshold.  The stepping itself lives
in :mod:`cavitylattice._kernel`; this module owns configuration, random
streams, buffering, ensemble reduction and analysis helpers.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from . import _kernel
from .model import (
    HilbertGeometry,
    ModelParams,
    QuantumState,
    annihilation_matrix,
    hamiltonian_matrix,
    kinetic_matrix,
    lattice_matrix,
    number_matrix,
)

TRUNCATION_THRESHOLD = 1e-6
ORACLE_MAX_DIM = 400

_DRAW_BLOCK = 4096
_JUMP_BLOCK = 4096


class IntegrationError(RuntimeError):
    """The adaptive integrator could not continue; carries the last good state."""

    def __init__(self, message: str, state: QuantumState, time: float):
        super().__init__(message)
        self.state = state
        self.time = time


class OffGridWarning(UserWarning):
    """A requested time was not on the sample grid; the nearest sample was used."""


class BandOverlapWarning(UserWarning):
    """Tolerance bands around branch photon numbers overlapped and were shrunk."""


@dataclass(frozen=True)
class TrajectoryConfig:
    """Everything needed to reproduce one trajectory.

    ``joint_times`` lists times at which the full joint distribution P(n, j)
    is stored (it is large, so it is kept only where asked for).  ``shift``
    is a global energy offset of the generator; it only changes the phase
    of the state and can be used to tune the integrator.
    """

    geometry: HilbertGeometry
    params: ModelParams
    n0: int = 1
    j0: int = 0
    t_final: float = 10.0
    sample_dt: float = 0.1
    seed: int = 0
    tol: float = 1e-8
    joint_times: tuple[float, ...] = ()
    shift: float = 0.0

    def __post_init__(self):
        if not self.sample_dt > 0:
            raise ValueError("sample_dt must be positive")
        if self.t_final < self.sample_dt:
            raise ValueError("t_final must be at least sample_dt")
        if not 0 <= self.n0 <= self.geometry.n_ph_max:
            raise ValueError(f"initial photon number {self.n0} outside 0..{self.geometry.n_ph_max}")
        self.geometry.j_index(self.j0)
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        object.__setattr__(self, "joint_times", tuple(float(t) for t in self.joint_times))

    @property
    def sample_times(self) -> np.ndarray:
        return sample_grid(self.t_final, self.sample_dt)

    def replace(self, **changes) -> "TrajectoryConfig":
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        return TrajectoryConfig(**values)

    def initial_state(self) -> QuantumState:
        return QuantumState.basis(self.geometry, self.n0, self.j0)


def sample_grid(t_final: float, dt: float) -> np.ndarray:
    """Uniform grid 0, dt, 2 dt, ... up to t_final, built from integer multiples."""
    count = int(math.floor(t_final / dt + 1e-9))
    return dt * np.arange(count + 1)


def _nearest_index(times: np.ndarray, t: float) -> int:
    idx = int(np.argmin(np.abs(times - t)))
    spacing = times[1] - times[0] if times.size > 1 else 1.0
    if abs(times[idx] - t) > 1e-9 * max(1.0, abs(spacing)):
        warnings.warn(f"t={t} is not on the sample grid; using t={times[idx]}", OffGridWarning, stacklevel=3)
    return idx


@dataclass
class TrajectoryRecord:
    """Sampled observables of one trajectory.

    ``alpha`` is the expectation value of the annihilation operator; ``joint``
    has one P(n, j) matrix per entry of ``joint_times``.
    """

    times: np.ndarray
    n_mean: np.ndarray
    e_kin: np.ndarray
    bunching: np.ndarray
    alpha: np.ndarray
    odd_weight: np.ndarray
    boundary_weight: np.ndarray
    p_n: np.ndarray
    p_j: np.ndarray
    joint_times: np.ndarray
    joint: np.ndarray
    jump_times: np.ndarray
    final_state: QuantumState
    seed: int
    n_steps: int = 0

    @property
    def max_boundary_weight(self) -> float:
        return float(self.boundary_weight.max())

    @property
    def truncation_warning(self) -> bool:
        return self.max_boundary_weight > TRUNCATION_THRESHOLD

    def series(self, observable: str) -> np.ndarray:
        return _series(self, observable)


_SCALARS = ("n_mean", "e_kin", "bunching")


def _series(source, observable: str) -> np.ndarray:
    if observable not in _SCALARS and observable not in ("odd_weight", "boundary_weight"):
        raise ValueError(f"unknown observable {observable!r}")
    return getattr(source, observable)


def _joint_slots(times: np.ndarray, joint_times: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    slots = -np.ones(times.size, dtype=np.int64)
    picked = []
    for t in joint_times:
        idx = _nearest_index(times, t)
        if slots[idx] < 0:
            slots[idx] = len(picked)
            picked.append(times[idx])
    return slots, np.asarray(picked)


def run_trajectory(config: TrajectoryConfig) -> TrajectoryRecord:
    """Integrate one quantum-jump trajectory; deterministic for a given config."""
    geometry = config.geometry
    params = config.params
    step = geometry.lattice_step
    js = geometry.js
    js2 = js.astype(float) ** 2
    js_odd = js % 2 != 0
    times = config.sample_times
    ns = times.size
    n_ph = geometry.n_ph_max + 1

    slots, joint_times = _joint_slots(times, config.joint_times)
    out_scalar = np.zeros((ns, 7))
    out_pn = np.zeros((ns, n_ph))
    out_pj = np.zeros((ns, geometry.n_j))
    joint_out = np.zeros((max(len(joint_times), 1), n_ph, geometry.n_j))

    rng = np.random.default_rng(config.seed)
    y = _kernel.pad_state(config.initial_state().amplitudes, step)
    jump_buf = np.zeros(_JUMP_BLOCK)
    jumps: list[np.ndarray] = []
    t, h, r = 0.0, 1e-3, -1.0
    i_sample = 0
    total_steps = 0
    h_min = 1e-12 * max(1.0, config.t_final)
    draws = rng.random(_DRAW_BLOCK)
    i_draw = 0
    while True:
        status, t, h, r, i_sample, i_draw, n_jumps, n_steps = _kernel.propagate(
            y, t, config.t_final, h, r, js2, js_odd, step,
            params.delta_c, params.u0, params.eta, params.kappa, config.shift, config.tol,
            times, i_sample, slots, draws, i_draw, jump_buf, 0,
            out_scalar, out_pn, out_pj, joint_out,
            _kernel.DP_A, _kernel.DP_B, _kernel.DP_C, _kernel.DP_E, _kernel.DP_P, h_min,
        )
        total_steps += n_steps
        jumps.append(jump_buf[:n_jumps].copy())
        if status == _kernel.STATUS_DONE:
            break
        if status == _kernel.STATUS_STEP_COLLAPSE:
            last = QuantumState(_kernel.unpad_state(y, step), geometry)
            raise IntegrationError(f"step size collapsed at t={t:.6g}", last, t)
        if status == _kernel.STATUS_NEED_DRAWS:
            # the uniform stream continues seamlessly across blocks
            draws = rng.random(_DRAW_BLOCK)
            i_draw = 0
        # STATUS_JUMP_BUFFER_FULL: the buffer was copied out, just resume

    psi = _kernel.unpad_state(y, step)
    final = QuantumState(psi / np.linalg.norm(psi), geometry)
    return TrajectoryRecord(
        times=times,
        n_mean=out_scalar[:, 0].copy(),
        e_kin=out_scalar[:, 1].copy(),
        bunching=out_scalar[:, 2].copy(),
        alpha=out_scalar[:, 3] + 1j * out_scalar[:, 4],
        odd_weight=out_scalar[:, 5].copy(),
        boundary_weight=out_scalar[:, 6].copy(),
        p_n=out_pn,
        p_j=out_pj,
        joint_times=joint_times,
        joint=joint_out[: len(joint_times)].copy(),
        jump_times=np.concatenate(jumps) if jumps else np.zeros(0),
        final_state=final,
        seed=int(config.seed),
        n_steps=total_steps,
    )


def trajectory_seeds(base_seed: int, count: int) -> list[int]:
    """Independent per-trajectory seeds, a pure function of (base_seed, index)."""
    return [
        int(np.random.SeedSequence(base_seed, spawn_key=(i,)).generate_state(1, np.uint64)[0])
        for i in range(count)
    ]


@dataclass
class EnsembleStats:
    """Ensemble averages; ``series`` keeps per-trajectory scalar time series.

    Standard errors are sample standard deviations over trajectories divided
    by sqrt(count) (zero for a single trajectory).
    """

    count: int
    times: np.ndarray
    series: dict[str, np.ndarray] = field(repr=False)
    p_n: np.ndarray = field(repr=False)
    p_j: np.ndarray = field(repr=False)
    joint_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    joint: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)), repr=False)
    seeds: tuple[int, ...] = ()
    jump_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    max_boundary_weight: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_odd_weight: float = 0.0

    def mean(self, observable: str) -> np.ndarray:
        return self.series[observable].mean(axis=0)

    def sem(self, observable: str) -> np.ndarray:
        data = self.series[observable]
        if self.count < 2:
            return np.zeros(data.shape[1])
        return data.std(axis=0, ddof=1) / math.sqrt(self.count)

    @property
    def n_mean(self) -> np.ndarray:
        return self.mean("n_mean")

    @property
    def n_sem(self) -> np.ndarray:
        return self.sem("n_mean")

    @property
    def e_kin(self) -> np.ndarray:
        return self.mean("e_kin")

    @property
    def e_kin_sem(self) -> np.ndarray:
        return self.sem("e_kin")

    @property
    def truncated_count(self) -> int:
        return int(np.sum(self.max_boundary_weight > TRUNCATION_THRESHOLD))


def run_ensemble(config: TrajectoryConfig, count: int, base_seed: int | None = None,
                 workers: int | None = None) -> EnsembleStats:
    """Run ``count`` trajectories and reduce them in index order.

    Seeds come from :func:`trajectory_seeds` (``base_seed`` defaults to
    ``config.seed``), so the result does not depend on ``workers``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    base = config.seed if base_seed is None else base_seed
    seeds = trajectory_seeds(base, count)
    configs = [config.replace(seed=s) for s in seeds]
    times = config.sample_times
    ns = times.size
    series = {name: np.zeros((count, ns)) for name in _SCALARS}
    p_n = np.zeros((ns, config.geometry.n_ph_max + 1))
    p_j = np.zeros((ns, config.geometry.n_j))
    joint = None
    joint_times = np.zeros(0)
    jump_counts = np.zeros(count, dtype=int)
    max_boundary = np.zeros(count)
    max_odd = 0.0

    def consume(i: int, rec: TrajectoryRecord):
        nonlocal joint, joint_times, max_odd
        for name in _SCALARS:
            series[name][i] = getattr(rec, name)
        p_n[...] += rec.p_n
        p_j[...] += rec.p_j
        if joint is None:
            joint = rec.joint.copy()
            joint_times = rec.joint_times
        else:
            joint += rec.joint
        jump_counts[i] = rec.jump_times.size
        max_boundary[i] = rec.max_boundary_weight
        max_odd = max(max_odd, float(rec.odd_weight.max()))

    n_workers = workers or 1
    if n_workers == 1:
        for i, cfg in enumerate(configs):
            consume(i, run_trajectory(cfg))
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            # map yields in submission order, which fixes the reduction order
            for i, rec in enumerate(pool.map(run_trajectory, configs)):
                consume(i, rec)

    return EnsembleStats(
        count=count,
        times=times,
        series=series,
        p_n=p_n / count,
        p_j=p_j / count,
        joint_times=joint_times,
        joint=joint / count,
        seeds=tuple(seeds),
        jump_counts=jump_counts,
        max_boundary_weight=max_boundary,
        max_odd_weight=max_odd,
    )


def joint_distribution(stats: EnsembleStats | TrajectoryRecord, t: float, fold: bool = False,
                       geometry: HilbertGeometry | None = None) -> np.ndarray:
    """P(n, j) at a stored joint time; ``fold`` sums +j and -j into P(n, |j|).

    Folding needs the geometry to know the momentum values; columns of the
    folded matrix are |j| = 0, step, 2 step, ... j_max.
    """
    if stats.joint_times.size == 0:
        raise ValueError("no joint distributions were stored; set joint_times in the config")
    idx = _nearest_index(stats.joint_times, t)
    mat = stats.joint[idx]
    if not fold:
        return mat.copy()
    if geometry is None:
        raise ValueError("fold=True needs the geometry")
    js = geometry.js
    absj = np.unique(np.abs(js))
    out = np.zeros((mat.shape[0], absj.size))
    for col, j in enumerate(js):
        out[:, np.searchsorted(absj, abs(j))] += mat[:, col]
    return out


@dataclass(frozen=True)
class WindowAverage:
    mean: float
    sem: float
    samples: int


def time_window_average(source: EnsembleStats | TrajectoryRecord, window: tuple[float, float],
                        observable: str = "e_kin") -> WindowAverage:
    """Mean of an observable over samples with t1 < t <= t2.

    For an ensemble each trajectory is first averaged over the window and
    the standard error is taken across those per-trajectory means.
    """
    t1, t2 = window
    times = source.times
    eps = 1e-9 * max(1.0, abs(t2))
    mask = (times > t1 + eps) & (times <= t2 + eps)
    count = int(mask.sum())
    if count == 0:
        raise ValueError(f"window ({t1}, {t2}] contains no samples")
    if isinstance(source, EnsembleStats):
        per_traj = source.series[observable][:, mask].mean(axis=1)
        sem = float(per_traj.std(ddof=1) / math.sqrt(per_traj.size)) if per_traj.size > 1 else 0.0
        return WindowAverage(float(per_traj.mean()), sem, count)
    values = _series(source, observable)[mask]
    return WindowAverage(float(values.mean()), 0.0, count)


def branch_occupancy(record: TrajectoryRecord | EnsembleStats | np.ndarray | Iterable,
                     branches: Sequence, tolerance_band: float) -> dict:
    """Fraction of samples whose <n> lies within +-tolerance_band of a stable branch.

    ``branches`` are objects with ``n_mean`` and ``stable`` attributes (for
    example :class:`cavitylattice.meanfield.SelfConsistentBranch`); unstable
    branches are ignored.  Keys of the result are indices into ``branches``
    plus ``"transit"`` for the remainder.  Overlapping bands are shrunk to
    half the gap between neighbours with a warning.
    """
    if isinstance(record, TrajectoryRecord):
        values = record.n_mean
    elif isinstance(record, EnsembleStats):
        values = record.series["n_mean"].ravel()
    else:
        values = np.concatenate([np.atleast_1d(np.asarray(v, dtype=float)).ravel() for v in record]) \
            if not isinstance(record, np.ndarray) else record.ravel()
    if tolerance_band <= 0:
        raise ValueError("tolerance_band must be positive")
    stable = [(i, float(b.n_mean)) for i, b in enumerate(branches) if b.stable]
    stable.sort(key=lambda item: item[1])
    half = {i: tolerance_band for i, _ in stable}
    for (i, ni), (k, nk) in zip(stable, stable[1:]):
        gap = nk - ni
        if half[i] + half[k] > gap:
            warnings.warn("tolerance bands overlap; shrinking them", BandOverlapWarning, stacklevel=2)
            half[i] = min(half[i], gap / 2)
            half[k] = min(half[k], gap / 2)
    total = values.size
    result: dict = {}
    claimed = np.zeros(total, dtype=bool)
    for i, ni in stable:
        inside = (np.abs(values - ni) <= half[i]) & ~claimed
        claimed |= inside
        result[i] = float(inside.sum() / total)
    result["transit"] = float((~claimed).sum() / total)
    return result


# Density-matrix oracle -----------------------------------------------------

@dataclass(frozen=True)
class ValidationOracle:
    """Density matrix over the flattened (n, j) product basis of a small geometry."""

    rho: np.ndarray
    geometry: HilbertGeometry

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=complex)
        dim = self.geometry.dim
        if rho.shape != (dim, dim):
            raise ValueError(f"density matrix shape {rho.shape} does not match dimension {dim}")
        if dim > ORACLE_MAX_DIM:
            raise ValueError(f"oracle dimension {dim} exceeds the validation limit {ORACLE_MAX_DIM}")
        object.__setattr__(self, "rho", rho)

    @classmethod
    def pure(cls, state: QuantumState) -> "ValidationOracle":
        v = state.amplitudes.reshape(-1)
        return cls(np.outer(v, v.conj()), state.geometry)

    def check(self, herm_tol: float = 1e-12, trace_tol: float = 1e-9, psd_tol: float = 1e-10) -> None:
        rho = self.rho
        if np.max(np.abs(rho - rho.conj().T)) > herm_tol:
            raise ValueError("density matrix is not Hermitian")
        if abs(np.trace(rho).real - 1.0) > trace_tol:
            raise ValueError("density matrix trace deviates from 1")
        if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() < -psd_tol:
            raise ValueError("density matrix has a negative eigenvalue")


@dataclass
class OracleSeries:
    times: np.ndarray
    n_mean: np.ndarray
    e_kin: np.ndarray
    bunching: np.ndarray
    alpha: np.ndarray
    joint: np.ndarray = field(repr=False)
    trace: np.ndarray = field(repr=False)
    final: ValidationOracle | None = None


def integrate_master_equation(oracle: ValidationOracle, params: ModelParams, t_final: float,
                              sample_dt: float, rtol: float = 1e-10, atol: float = 1e-12) -> OracleSeries:
    """Integrate the Lindblad equation with loss operator sqrt(2 kappa) a.

    The generator is written as L(rho) = X + X^dagger with
    X = -i H_eff rho + kappa a rho a^dagger, so every evaluated derivative
    is exactly Hermitian.
    """
    geometry = oracle.geometry
    dim = geometry.dim
    h_eff = hamiltonian_matrix(geometry, params) - 1j * params.kappa * number_matrix(geometry)
    a = annihilation_matrix(geometry)
    ad = a.conj().T
    m_left = -1j * h_eff

    def deriv(_t, flat):
        rho = flat.reshape(dim, dim)
        x = m_left @ rho + params.kappa * (a @ rho @ ad)
        return (x + x.conj().T).reshape(-1)

    times = sample_grid(t_final, sample_dt)
    sol = solve_ivp(deriv, (0.0, float(times[-1])), oracle.rho.reshape(-1), method="DOP853",
                    t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"master-equation integration failed: {sol.message}")
    n_op = number_matrix(geometry)
    k_op = kinetic_matrix(geometry)
    c_op = lattice_matrix(geometry)
    ns = times.size
    out_n = np.zeros(ns)
    out_k = np.zeros(ns)
    out_b = np.zeros(ns)
    out_a = np.zeros(ns, dtype=complex)
    out_tr = np.zeros(ns)
    joint = np.zeros((ns,) + geometry.shape)
    for i in range(ns):
        rho = sol.y[:, i].reshape(dim, dim)
        rho = 0.5 * (rho + rho.conj().T)
        out_tr[i] = np.trace(rho).real
        out_n[i] = np.trace(n_op @ rho).real
        out_k[i] = np.trace(k_op @ rho).real
        out_b[i] = np.trace(c_op @ rho).real
        out_a[i] = np.trace(a @ rho)
        joint[i] = np.diag(rho).real.reshape(geometry.shape)
    final = sol.y[:, -1].reshape(dim, dim)
    final = ValidationOracle(0.5 * (final + final.conj().T), geometry)
    return OracleSeries(times, out_n, out_k, out_b, out_a, joint, out_tr, final)
