"""Parameters, truncated Hilbert space and operator actions.

Units throughout: hbar = omega_R = k_R = 1, so the particle mass is 1/2 and a
plane wave exp(i j k_R x) has kinetic energy j**2.

A state is stored as a complex array ``amps[n, k]`` where ``n`` is the photon
number (0..n_ph_max) and ``k`` indexes the momentum values ``geometry.js``.
In the full basis ``js = -j_max..j_max``; in the even-parity reduction only
even momenta are kept.  The lattice operator cos^2(k_R x) couples j to j +- 2,
which is a neighbour offset of 2 columns in the full basis and 1 column in the
reduced one (``geometry.lattice_step``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Amplitude array does not match the declared Hilbert geometry."""


class NoJumpPossible(ValueError):
    """Raised when a photon-loss jump is applied to a state without photons."""


class NormalizationError(ValueError):
    """Observables were requested for a state that is not normalized."""


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters in recoil units.

    eta: pump amplitude, delta_c: cavity detuning, u0: light shift per photon
    (negative for high-field seekers), kappa: field decay rate.
    """

    eta: float
    delta_c: float
    u0: float
    kappa: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if self.eta < 0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")

    def replace(self, **changes) -> "ModelParams":
        values = {"eta": self.eta, "delta_c": self.delta_c, "u0": self.u0, "kappa": self.kappa}
        values.update(changes)
        return ModelParams(**values)

    def to_dict(self) -> dict:
        return {"eta": self.eta, "delta_c": self.delta_c, "u0": self.u0, "kappa": self.kappa}


@dataclass(frozen=True)
class HilbertGeometry:
    n_ph_max: int
    j_max: int
    even_parity_only: bool = False

    def __post_init__(self):
        if self.n_ph_max < 1:
            raise ValueError("n_ph_max must be >= 1")
        if self.j_max < 2:
            raise ValueError("j_max must be >= 2")
        if self.even_parity_only and self.j_max % 2:
            raise ValueError("j_max must be even when even_parity_only is set")

    @property
    def js(self) -> np.ndarray:
        step = 2 if self.even_parity_only else 1
        return np.arange(-self.j_max, self.j_max + 1, step)

    @property
    def n_j(self) -> int:
        return self.j_max + 1 if self.even_parity_only else 2 * self.j_max + 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_ph_max + 1, self.n_j)

    @property
    def dim(self) -> int:
        return (self.n_ph_max + 1) * self.n_j

    @property
    def lattice_step(self) -> int:
        """Column offset corresponding to a momentum change of 2 k_R."""
        return 1 if self.even_parity_only else 2

    def j_index(self, j: int) -> int:
        js = self.js
        hit = np.nonzero(js == j)[0]
        if hit.size == 0:
            raise ValueError(f"momentum j={j} is not in the basis")
        return int(hit[0])

    def to_dict(self) -> dict:
        return {
            "n_ph_max": self.n_ph_max,
            "j_max": self.j_max,
            "even_parity_only": self.even_parity_only,
        }


@dataclass(frozen=True)
class QuantumState:
    amplitudes: np.ndarray
    geometry: HilbertGeometry

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != self.geometry.shape:
            raise DimensionError(
                f"amplitude shape {amps.shape} does not match geometry {self.geometry.shape}"
            )
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def basis(cls, geometry: HilbertGeometry, n: int, j: int) -> "QuantumState":
        amps = np.zeros(geometry.shape, dtype=complex)
        amps[n, geometry.j_index(j)] = 1.0
        return cls(amps, geometry)

    @classmethod
    def product(cls, geometry: HilbertGeometry, photon: np.ndarray, motion: np.ndarray) -> "QuantumState":
        """Product state from a photon amplitude vector and a momentum amplitude vector."""
        return cls(np.outer(photon, motion), geometry)

    def norm(self) -> float:
        return float(np.sqrt(np.vdot(self.amplitudes, self.amplitudes).real))

    def normalized(self) -> "QuantumState":
        return QuantumState(self.amplitudes / self.norm(), self.geometry)

    def vdot(self, other: "QuantumState") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))


@dataclass(frozen=True)
class ObservableSet:
    n_mean: float
    alpha: complex
    e_kin: float
    bunching: float
    joint: np.ndarray = field(repr=False)
    odd_weight: float

    @property
    def p_n(self) -> np.ndarray:
        return self.joint.sum(axis=1)

    @property
    def p_j(self) -> np.ndarray:
        return self.joint.sum(axis=0)


def _check(state: QuantumState, geometry: HilbertGeometry | None = None) -> np.ndarray:
    psi = state.amplitudes
    geometry = geometry or state.geometry
    if psi.shape != geometry.shape:
        raise DimensionError(f"state shape {psi.shape} does not match geometry {geometry.shape}")
    return psi


def _shift_down(psi: np.ndarray, step: int) -> np.ndarray:
    """out[:, k] = psi[:, k + step] (zero past the boundary)."""
    out = np.zeros_like(psi)
    out[:, :-step] = psi[:, step:]
    return out


def _shift_up(psi: np.ndarray, step: int) -> np.ndarray:
    """out[:, k] = psi[:, k - step] (zero past the boundary)."""
    out = np.zeros_like(psi)
    out[:, step:] = psi[:, :-step]
    return out


def apply_cos2(psi: np.ndarray, step: int) -> np.ndarray:
    """Act with cos^2(k_R x) along the momentum axis (last axis) of ``psi``."""
    return 0.5 * psi + 0.25 * (_shift_down(psi, step) + _shift_up(psi, step))


def apply_annihilation(psi: np.ndarray) -> np.ndarray:
    out = np.zeros_like(psi)
    sq = np.sqrt(np.arange(1, psi.shape[0]))[:, None]
    out[:-1] = sq * psi[1:]
    return out


def apply_creation(psi: np.ndarray) -> np.ndarray:
    out = np.zeros_like(psi)
    sq = np.sqrt(np.arange(1, psi.shape[0]))[:, None]
    out[1:] = sq * psi[:-1]
    return out


def _hamiltonian_amps(psi: np.ndarray, geometry: HilbertGeometry, params: ModelParams, damping: bool) -> np.ndarray:
    js = geometry.js
    nvec = np.arange(psi.shape[0], dtype=float)[:, None]
    out = (js.astype(float) ** 2)[None, :] * psi
    # -(Delta_C - U0 cos^2) n  ->  -Delta_C n psi + U0 n cos^2 psi
    out = out - params.delta_c * nvec * psi + params.u0 * nvec * apply_cos2(psi, geometry.lattice_step)
    if params.eta:
        out = out - 1j * params.eta * (apply_annihilation(psi) - apply_creation(psi))
    if damping:
        out = out - 1j * params.kappa * nvec * psi
    return out


def apply_hamiltonian(state: QuantumState, params: ModelParams) -> QuantumState:
    """Return H|psi> for the cavity-particle Hamiltonian in the rotating frame."""
    psi = _check(state)
    return QuantumState(_hamiltonian_amps(psi, state.geometry, params, damping=False), state.geometry)


def apply_effective_hamiltonian(state: QuantumState, params: ModelParams) -> QuantumState:
    """Return (H - i kappa n)|psi>, the non-Hermitian generator between jumps."""
    psi = _check(state)
    return QuantumState(_hamiltonian_amps(psi, state.geometry, params, damping=True), state.geometry)


def apply_jump(state: QuantumState) -> QuantumState:
    """Remove one photon and renormalize."""
    psi = _check(state)
    out = apply_annihilation(psi)
    norm = np.sqrt(np.vdot(out, out).real)
    if norm == 0.0:
        raise NoJumpPossible("state has no photons; a jump is not possible")
    return QuantumState(out / norm, state.geometry)


def observables(state: QuantumState, tol: float = 1e-8) -> ObservableSet:
    psi = _check(state)
    geometry = state.geometry
    joint = np.abs(psi) ** 2
    total = joint.sum()
    if abs(np.sqrt(total) - 1.0) > tol:
        raise NormalizationError(f"state norm {np.sqrt(total):.3e} deviates from 1 by more than {tol}")
    js = geometry.js
    nvec = np.arange(psi.shape[0])
    n_mean = float(nvec @ joint.sum(axis=1))
    e_kin = float(joint.sum(axis=0) @ (js.astype(float) ** 2))
    bunching = float(np.vdot(psi, apply_cos2(psi, geometry.lattice_step)).real)
    alpha = complex(np.vdot(psi, apply_annihilation(psi)))
    odd = float(joint[:, js % 2 != 0].sum())
    return ObservableSet(n_mean=n_mean, alpha=alpha, e_kin=e_kin, bunching=bunching, joint=joint, odd_weight=odd)


def boundary_population(state: QuantumState) -> float:
    """Probability on the truncation edge: the top photon number or |j| = j_max."""
    joint = np.abs(state.amplitudes) ** 2
    edge = np.zeros(joint.shape, dtype=bool)
    edge[-1, :] = True
    edge[:, 0] = True
    edge[:, -1] = True
    return float(joint[edge].sum())


# Dense matrices over the flattened (n, k) basis, row-major.  Used by the
# density-matrix oracle and by tests; the dynamics itself is matrix-free.

def cos2_matrix(geometry: HilbertGeometry) -> np.ndarray:
    n_j = geometry.n_j
    step = geometry.lattice_step
    c = 0.5 * np.eye(n_j) + 0.25 * (np.eye(n_j, k=step) + np.eye(n_j, k=-step))
    return c


def annihilation_matrix(geometry: HilbertGeometry) -> np.ndarray:
    a = np.diag(np.sqrt(np.arange(1, geometry.n_ph_max + 1, dtype=float)), k=1)
    return np.kron(a, np.eye(geometry.n_j))


def number_matrix(geometry: HilbertGeometry) -> np.ndarray:
    return np.kron(np.diag(np.arange(geometry.n_ph_max + 1, dtype=float)), np.eye(geometry.n_j))


def kinetic_matrix(geometry: HilbertGeometry) -> np.ndarray:
    return np.kron(np.eye(geometry.n_ph_max + 1), np.diag(geometry.js.astype(float) ** 2))


def lattice_matrix(geometry: HilbertGeometry) -> np.ndarray:
    """cos^2(k_R x) on the product space."""
    return np.kron(np.eye(geometry.n_ph_max + 1), cos2_matrix(geometry))


def hamiltonian_matrix(geometry: HilbertGeometry, params: ModelParams) -> np.ndarray:
    a = annihilation_matrix(geometry)
    n = number_matrix(geometry)
    h = kinetic_matrix(geometry) - params.delta_c * n + params.u0 * n @ lattice_matrix(geometry)
    h = h - 1j * params.eta * (a - a.conj().T)
    return h
