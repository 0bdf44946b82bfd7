"""Dense multi-qubit linear algebra and a fixed-step Lindblad integrator.

States are plain complex vectors of length 2**n, operators are dense
complex matrices.  The density-matrix integrator here is the deterministic
reference that the trajectory ensembles in :mod:`qdc.sse` are checked
against, so it deliberately uses the same time grid as the stochastic
solvers (fixed-step RK4, one constant control value per bin).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

HERM_TOL = 1e-12
NORM_TOL = 1e-9
PSD_TOL = -1e-10

_PAULI = {
    "i": np.eye(2, dtype=complex),
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
}
_PAULI["plus"] = 0.5 * (_PAULI["x"] + 1j * _PAULI["y"])
_PAULI["minus"] = 0.5 * (_PAULI["x"] - 1j * _PAULI["y"])


def as_matrix(op) -> np.ndarray:
    """Coerce an OperatorMatrix or array-like to a complex ndarray."""
    if isinstance(op, OperatorMatrix):
        return op.mat
    return np.asarray(op, dtype=complex)


@dataclass(frozen=True)
class QuantumState:
    """Normalized pure state of ``n_qubits`` qubits (vector of length 2**n)."""

    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex).ravel()
        object.__setattr__(self, "amplitudes", amps)
        n = amps.size
        if n < 2 or (n & (n - 1)) != 0:
            raise ValueError(f"state length {n} is not a power of two")
        if abs(np.vdot(amps, amps).real - 1.0) > NORM_TOL:
            raise ValueError("state is not normalized")

    @classmethod
    def normalized(cls, amplitudes) -> "QuantumState":
        amps = np.asarray(amplitudes, dtype=complex).ravel()
        nrm = np.linalg.norm(amps)
        if nrm == 0:
            raise ValueError("cannot normalize the zero vector")
        return cls(amps / nrm)

    @property
    def n_qubits(self) -> int:
        return int(np.log2(self.amplitudes.size).round())

    @property
    def dim(self) -> int:
        return self.amplitudes.size

    def density(self) -> np.ndarray:
        a = self.amplitudes
        return np.outer(a, a.conj())


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian, unit-trace, positive-semidefinite matrix."""

    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=complex)
        object.__setattr__(self, "entries", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("density matrix must be square")
        if np.abs(m - m.conj().T).max() > HERM_TOL:
            raise ValueError("density matrix is not Hermitian")
        if abs(np.trace(m).real - 1.0) > NORM_TOL:
            raise ValueError("density matrix trace differs from 1")
        if np.linalg.eigvalsh(m).min() < -NORM_TOL:
            raise ValueError("density matrix has a negative eigenvalue")

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


def classify_hermiticity(mat: np.ndarray, tol: float = HERM_TOL) -> str:
    scale = max(np.abs(mat).max(), 1.0)
    if np.abs(mat - mat.conj().T).max() <= tol * scale:
        return "hermitian"
    if np.abs(mat + mat.conj().T).max() <= tol * scale:
        return "anti_hermitian"
    return "general"


@dataclass(frozen=True)
class OperatorMatrix:
    """Dense operator with a cached Hermiticity classification."""

    mat: np.ndarray
    tag: str = ""

    def __post_init__(self):
        m = np.asarray(self.mat, dtype=complex)
        object.__setattr__(self, "mat", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("operator must be a square matrix")
        tag = classify_hermiticity(m)
        if self.tag and self.tag != tag:
            raise ValueError(f"tag {self.tag!r} inconsistent with entries ({tag})")
        object.__setattr__(self, "tag", tag)

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def dagger(self) -> np.ndarray:
        return self.mat.conj().T

    def hermitian_part(self) -> np.ndarray:
        return 0.5 * (self.mat + self.mat.conj().T)


@dataclass(frozen=True)
class NoiseMatrix:
    """Real symmetric positive-semidefinite channel covariance (rate units)."""

    mat: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mat, dtype=float)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        object.__setattr__(self, "mat", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("noise matrix must be square")
        if np.abs(m - m.T).max() > HERM_TOL * max(np.abs(m).max(), 1.0):
            raise ValueError("noise matrix is not symmetric")
        if m.size and np.linalg.eigvalsh(m).min() < PSD_TOL:
            raise ValueError("noise matrix is not positive semidefinite")

    @classmethod
    def scaled_identity(cls, value: float, n_channels: int) -> "NoiseMatrix":
        return cls(value * np.eye(n_channels))

    @property
    def n_channels(self) -> int:
        return self.mat.shape[0]

    def factor(self) -> np.ndarray:
        """A matrix L with L L^T equal to the covariance (Cholesky, eigen fallback)."""
        m = self.mat
        try:
            return np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            w, v = np.linalg.eigh(m)
            if w.min() < PSD_TOL:
                raise
            return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class OperatorSet:
    """One control problem in master-equation form.

    ``h0`` is the drift Hamiltonian, ``controls`` the Hermitian generators
    multiplied by the pulse amplitudes, ``c_ops`` the dissipation operators
    and ``noise`` their covariance matrix.
    """

    h0: np.ndarray
    controls: tuple
    c_ops: tuple
    noise: NoiseMatrix

    def __post_init__(self):
        object.__setattr__(self, "h0", np.asarray(self.h0, dtype=complex))
        object.__setattr__(self, "controls", tuple(as_matrix(c) for c in self.controls))
        object.__setattr__(self, "c_ops", tuple(as_matrix(c) for c in self.c_ops))
        if len(self.c_ops) != self.noise.n_channels:
            raise ValueError("number of dissipators must match the noise matrix size")

    @property
    def dim(self) -> int:
        return self.h0.shape[0]

    @property
    def n_controls(self) -> int:
        return len(self.controls)


def pauli_operator(axis: str, qubit: int, n_qubits: int) -> OperatorMatrix:
    """Single-qubit Pauli (or ladder) operator embedded into an n-qubit register.

    ``axis`` is one of ``x, y, z, plus, minus``; qubit 0 is the leftmost
    tensor factor.
    """
    axis = axis.lower()
    if axis not in ("x", "y", "z", "plus", "minus"):
        raise ValueError(f"unknown axis {axis!r}")
    if not 0 <= qubit < n_qubits:
        raise IndexError(f"qubit {qubit} out of range for {n_qubits} qubits")
    return tensor_chain([(_PAULI[axis], qubit)], n_qubits)


def tensor_chain(ops: Iterable, n_qubits: int) -> OperatorMatrix:
    """Kronecker product placing each (operator, qubit) factor, identity elsewhere."""
    placed = {}
    for op, q in ops:
        if q in placed:
            raise ValueError(f"duplicate qubit index {q}")
        if not 0 <= q < n_qubits:
            raise IndexError(f"qubit {q} out of range for {n_qubits} qubits")
        placed[q] = as_matrix(op)
    out = np.array([[1.0 + 0j]])
    for q in range(n_qubits):
        out = np.kron(out, placed.get(q, _PAULI["i"]))
    return OperatorMatrix(out)


def fidelity(psi: QuantumState, phi: QuantumState) -> float:
    """Squared overlap of two pure states."""
    a, b = psi.amplitudes, phi.amplitudes
    if a.size != b.size:
        raise ValueError("states have different dimension")
    return float(np.abs(np.vdot(b, a)) ** 2)


def state_fidelities(states: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Squared overlaps of a stack of state rows with one target vector."""
    return np.abs(states @ np.conj(target)) ** 2


def dissipator_apply(noise, c_ops: Sequence, rho) -> np.ndarray:
    """Action of the dissipation superoperator on a matrix.

    Computes sum_ab D_ab (C_a rho C_b^dag - 1/2 {C_b^dag C_a, rho}) without
    forming any superoperator.  The result is traceless, and Hermitian
    whenever ``rho`` is Hermitian and D is real symmetric.
    """
    # raw arrays may be complex Hermitian (mid-transform covariances)
    d = noise.mat if isinstance(noise, NoiseMatrix) else np.asarray(noise)
    cs = [as_matrix(c) for c in c_ops]
    if d.shape != (len(cs), len(cs)):
        raise ValueError("noise matrix size does not match the dissipator count")
    rho = np.asarray(rho, dtype=complex)
    if cs and cs[0].shape != rho.shape:
        raise ValueError("dissipator dimension does not match the state")
    out = np.zeros_like(rho)
    for a in range(len(cs)):
        for b in range(len(cs)):
            dab = d[a, b]
            if dab == 0.0:
                continue
            cbd = cs[b].conj().T
            anti = cbd @ cs[a]
            out += dab * (cs[a] @ rho @ cbd - 0.5 * (anti @ rho + rho @ anti))
    return out


def lindblad_rhs(h: np.ndarray, noise, c_ops: Sequence, rho: np.ndarray) -> np.ndarray:
    """Right-hand side of the master equation for Hamiltonian ``h``."""
    return -1j * (h @ rho - rho @ h) + dissipator_apply(noise, c_ops, rho)


def integrate_lindblad(problem: OperatorSet, pulses: np.ndarray, grid, rho0) -> np.ndarray:
    """Fixed-step RK4 integration of the master equation over ``grid``.

    ``pulses`` has one column per control bin; the grid's step count must be
    a multiple of the bin count so steps never straddle a bin edge.  Returns
    the density matrix at every grid time, shape (n_steps + 1, N, N).
    """
    pulses = np.atleast_2d(np.asarray(pulses, dtype=float))
    if pulses.shape != (problem.n_controls, grid.n_bins):
        raise ValueError(
            f"pulse matrix {pulses.shape} does not align with "
            f"{problem.n_controls} controls x {grid.n_bins} bins"
        )
    rho = np.asarray(getattr(rho0, "entries", rho0), dtype=complex).copy()
    dt = grid.dt
    bin_of = grid.bin_of_step
    out = np.empty((grid.n_steps + 1,) + rho.shape, dtype=complex)
    out[0] = rho

    hs = [problem.h0 + sum(u * hc for u, hc in zip(pulses[:, k], problem.controls))
          for k in range(grid.n_bins)]
    d = problem.noise
    cs = problem.c_ops
    for j in range(grid.n_steps):
        h = hs[bin_of[j]]
        k1 = lindblad_rhs(h, d, cs, rho)
        k2 = lindblad_rhs(h, d, cs, rho + 0.5 * dt * k1)
        k3 = lindblad_rhs(h, d, cs, rho + 0.5 * dt * k2)
        k4 = lindblad_rhs(h, d, cs, rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[j + 1] = rho
    return out


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Half the trace norm of the difference of two Hermitian matrices."""
    return 0.5 * float(np.abs(np.linalg.eigvalsh(a - b)).sum())


def basis_state(n_qubits: int, index: int = 0) -> QuantumState:
    amps = np.zeros(2 ** n_qubits, dtype=complex)
    amps[index] = 1.0
    return QuantumState(amps)
