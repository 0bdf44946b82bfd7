"""Dissipator-preserving transformations of the unraveling.

An invertible mixing matrix A acting on the dissipation operators,
C'_b = sum_a C_a A_ab together with D' = A^-1 D A^-dag, leaves the
dissipation superoperator unchanged while changing the stochastic
trajectory equation.  When every transformed operator is anti-Hermitian
and D' stays real symmetric PSD, the trajectory equation becomes linear
and norm preserving, which is the form the sampling controller needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qcore import NoiseMatrix, OperatorMatrix, as_matrix, dissipator_apply, pauli_operator, tensor_chain

# Mixes a (raising, lowering) pair into (-i sigma_x, -i sigma_y).
LADDER_TO_XY = np.array([[-1j, -1.0], [-1j, 1.0]])

TRANSFORM_TOL = 1e-10


@dataclass(frozen=True)
class GaugeTransform:
    """Invertible complex mixing matrix for the dissipation operators."""

    a: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.a, dtype=complex)
        object.__setattr__(self, "a", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("transform must be a square matrix")
        if abs(np.linalg.det(m)) <= 1e-12 or not np.isfinite(np.linalg.cond(m)):
            raise ValueError("transform matrix is singular")

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.a)


@dataclass(frozen=True)
class UnravelingSpec:
    """Anti-Hermitian dissipator set with its transformed noise matrix.

    ``c_tilde[a] = -1j * h_ops[a]`` with every ``h_ops[a]`` Hermitian, so the
    trajectory equation driven by these operators preserves the norm.
    """

    c_tilde: tuple
    d_tilde: NoiseMatrix
    tol: float = TRANSFORM_TOL

    def __post_init__(self):
        ops = tuple(OperatorMatrix(as_matrix(c)) for c in self.c_tilde)
        object.__setattr__(self, "c_tilde", ops)
        for idx, op in enumerate(ops):
            scale = max(np.abs(op.mat).max(), 1.0)
            if np.abs(op.mat + op.mat.conj().T).max() > self.tol * scale:
                raise ValueError(f"transformed operator {idx} is not anti-Hermitian")
        if len(ops) != self.d_tilde.n_channels:
            raise ValueError("noise matrix size does not match the operator count")

    @property
    def n_controls(self) -> int:
        return len(self.c_tilde)

    @property
    def dim(self) -> int:
        return self.c_tilde[0].dim

    def hermitian_generators(self) -> np.ndarray:
        """Stack of the Hermitian generators H_a = i * c_tilde[a]."""
        return np.stack([1j * op.mat for op in self.c_tilde])


def transform_dissipators(c_ops, noise: NoiseMatrix, transform: GaugeTransform,
                          tol: float = TRANSFORM_TOL) -> UnravelingSpec:
    """Mix dissipators into anti-Hermitian form, transforming the noise matrix.

    Fails fast, naming the offending operator, when the requested mixing does
    not produce anti-Hermitian operators or a real symmetric PSD noise matrix;
    not every dissipator set admits such a transformation.
    """
    cs = [as_matrix(c) for c in c_ops]
    a = transform.a
    if len(cs) != a.shape[0]:
        raise ValueError("transform size does not match the dissipator count")
    ainv = transform.inverse()
    d_new = ainv @ noise.mat @ ainv.conj().T
    if np.abs(d_new.imag).max() > tol * max(np.abs(d_new).max(), 1.0):
        raise ValueError("transformed noise matrix is not real")
    d_new = 0.5 * (d_new.real + d_new.real.T)
    mixed = [sum(cs[i] * a[i, b] for i in range(len(cs))) for b in range(len(cs))]
    return UnravelingSpec(tuple(mixed), NoiseMatrix(d_new), tol=tol)


def _random_hermitian_probe(dim: int, rng: np.random.Generator) -> np.ndarray:
    m = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    h = 0.5 * (m + m.conj().T)
    h += dim * np.eye(dim)  # keep the trace away from zero before normalizing
    return h / np.trace(h).real


def dissipator_invariance_gap(c_ops, noise, c_tilde, d_tilde,
                              probe_count: int = 20, rng=None) -> float:
    """Largest discrepancy of the two dissipator actions over random probes.

    Applies both (C, D) and (C', D') dissipators to ``probe_count`` random
    Hermitian trace-one matrices and returns the max entrywise difference.
    Zero (up to roundoff) certifies that the pair describes the same master
    equation.
    """
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    dim = as_matrix(c_ops[0]).shape[0]
    gap = 0.0
    for _ in range(probe_count):
        rho = _random_hermitian_probe(dim, rng)
        lhs = dissipator_apply(noise, c_ops, rho)
        rhs = dissipator_apply(d_tilde, c_tilde, rho)
        gap = max(gap, float(np.abs(lhs - rhs).max()))
    return gap


def nmr_transform(n_qubits: int, rate: float) -> UnravelingSpec:
    """Per-qubit mixing of the raising/lowering pair into x/y generators.

    Each qubit's (plus, minus) dissipators of strength ``rate`` become
    -i sigma_x and -i sigma_y with channel covariance rate/2.  Channels are
    ordered qubit by qubit, x before y.
    """
    if n_qubits < 1:
        raise ValueError("need at least one qubit")
    ops = []
    for q in range(n_qubits):
        for axis in ("x", "y"):
            ops.append(-1j * pauli_operator(axis, q, n_qubits).mat)
    d_new = NoiseMatrix.scaled_identity(rate / 2.0, 2 * n_qubits)
    return UnravelingSpec(tuple(ops), d_new)


def nmr_ladder_ops(n_qubits: int):
    """The untransformed per-qubit raising/lowering dissipators, same ordering."""
    ops = []
    for q in range(n_qubits):
        for axis in ("plus", "minus"):
            ops.append(pauli_operator(axis, q, n_qubits).mat)
    return tuple(ops)


def spin_chain_transform(n_qubits: int, rate_single: float, rate_pair: float) -> UnravelingSpec:
    """Single-site and nearest-neighbour pair dissipators in anti-Hermitian form.

    Site channels become -i sigma_i^{x,y} with covariance rate_single/2; pair
    channels become -i sigma_i^a sigma_{i+1}^b (a, b in {x, y}) with covariance
    rate_pair/4.  Site channels come first.
    """
    if n_qubits < 2:
        raise ValueError("chain needs at least two qubits")
    ops = []
    for q in range(n_qubits):
        for axis in ("x", "y"):
            ops.append(-1j * pauli_operator(axis, q, n_qubits).mat)
    for q in range(n_qubits - 1):
        for a in ("x", "y"):
            for b in ("x", "y"):
                pair = tensor_chain(
                    [(pauli_operator(a, 0, 1), q), (pauli_operator(b, 0, 1), q + 1)],
                    n_qubits,
                )
                ops.append(-1j * pair.mat)
    n_single = 2 * n_qubits
    n_pair = 4 * (n_qubits - 1)
    diag = np.concatenate([
        np.full(n_single, rate_single / 2.0),
        np.full(n_pair, rate_pair / 4.0),
    ])
    return UnravelingSpec(tuple(ops), NoiseMatrix(np.diag(diag)))


def spin_chain_ladder_ops(n_qubits: int):
    """Untransformed chain dissipators matching spin_chain_transform's ordering."""
    ops = []
    for q in range(n_qubits):
        for axis in ("plus", "minus"):
            ops.append(pauli_operator(axis, q, n_qubits).mat)
    for q in range(n_qubits - 1):
        for a in ("plus", "minus"):
            for b in ("plus", "minus"):
                pair = tensor_chain(
                    [(pauli_operator(a, 0, 1), q), (pauli_operator(b, 0, 1), q + 1)],
                    n_qubits,
                )
                ops.append(pair.mat)
    return tuple(ops)
