"""Ready-made control problems: noisy qubit, NMR molecules, spin chain.

Each builder returns a ProblemBundle holding both faces of the same
problem: the raw master-equation form (drift, controls, dissipators,
noise matrix) used by the deterministic integrator and the gradient
baseline, and the anti-Hermitian unraveling used by the sampling
optimizer.  Construction verifies that the two faces describe the same
dissipation and that the control weight is compatible with the channel
covariance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .gauge import (
    UnravelingSpec,
    dissipator_invariance_gap,
    nmr_ladder_ops,
    nmr_transform,
    spin_chain_ladder_ops,
    spin_chain_transform,
)
from .picontrol import ControlSchedule, CostSpec, pi_lambda
from .qcore import (
    NoiseMatrix,
    OperatorSet,
    QuantumState,
    basis_state,
    fidelity,
    pauli_operator,
    tensor_chain,
)
from .sse import LinearSSE, make_linear_sse

GAP_TOL = 1e-10


def plus_state() -> QuantumState:
    return QuantumState(np.array([1, 1]) / np.sqrt(2))


def y_state() -> QuantumState:
    return QuantumState(np.array([1, 1j]) / np.sqrt(2))


def ghz_state(n_qubits: int) -> QuantumState:
    amps = np.zeros(2 ** n_qubits, dtype=complex)
    amps[0] = amps[-1] = 1 / np.sqrt(2)
    return QuantumState(amps)


def haar_random_state(n_qubits: int, seed: int) -> QuantumState:
    """State with i.i.d. complex Gaussian amplitudes, normalized."""
    rng = np.random.default_rng(seed)
    dim = 2 ** n_qubits
    amps = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return QuantumState.normalized(amps)


@dataclass(frozen=True)
class NmrParams:
    """Chemical shifts, scalar couplings and the shortest relaxation time."""

    n_qubits: int
    shifts: tuple
    couplings: np.ndarray
    t1: float

    def __post_init__(self):
        object.__setattr__(self, "shifts", tuple(float(v) for v in self.shifts))
        j = np.asarray(self.couplings, dtype=float)
        object.__setattr__(self, "couplings", j)
        n = self.n_qubits
        if len(self.shifts) != n or j.shape != (n, n):
            raise ValueError("shifts/couplings sizes do not match n_qubits")
        if np.abs(j - j.T).max() > 1e-12 or np.abs(np.diagonal(j)).max() > 0:
            raise ValueError("couplings must be symmetric with zero diagonal")
        if self.t1 <= 0:
            raise ValueError("T1 must be positive")

    @classmethod
    def from_json(cls, path) -> "NmrParams":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(
            n_qubits=int(raw["n_qubits"]),
            shifts=raw["shifts"],
            couplings=np.asarray(raw["couplings"], dtype=float),
            t1=float(raw["T1"]),
        )


@dataclass(frozen=True)
class ProblemBundle:
    """A control problem in both master-equation and unraveling form."""

    h0: np.ndarray
    unraveling: UnravelingSpec
    cost: CostSpec
    psi0: QuantumState
    lindblad: OperatorSet
    frame: str = "none"
    gap_probes: int = 6

    def __post_init__(self):
        object.__setattr__(self, "h0", np.asarray(self.h0, dtype=complex))
        lam = pi_lambda(self.cost.r_matrix, self.unraveling.d_tilde)
        object.__setattr__(self, "_lam", lam)
        gap = dissipator_invariance_gap(
            self.lindblad.c_ops, self.lindblad.noise,
            [c.mat for c in self.unraveling.c_tilde], self.unraveling.d_tilde,
            probe_count=self.gap_probes, rng=0,
        )
        if gap > GAP_TOL:
            raise ValueError(f"unraveling does not match the dissipator (gap {gap:.2e})")

    @property
    def lam(self) -> float:
        return self._lam

    @property
    def n_channels(self) -> int:
        return self.unraveling.n_controls

    @property
    def dim(self) -> int:
        return self.h0.shape[0]

    def linear_sse(self, d_override: NoiseMatrix | None = None) -> LinearSSE:
        return make_linear_sse(self.h0, self.unraveling, d_override)

    def with_cost(self, cost: CostSpec) -> "ProblemBundle":
        return ProblemBundle(self.h0, self.unraveling, cost, self.psi0,
                             self.lindblad, self.frame, self.gap_probes)


def build_noisy_qubit(noise_rate: float, r_weight: float, q_weight: float,
                      target: QuantumState | None = None,
                      end_cost: str = "linear") -> ProblemBundle:
    """Driven qubit exchanging quanta with a field mode at rate ``noise_rate``.

    Drift-free, controls along x and y, raising/lowering dissipators mixed
    into the pair of anti-Hermitian generators with channel covariance
    noise_rate / 2.  Default transfer: equator state |X> to |Y>.
    """
    if noise_rate < 0:
        raise ValueError("noise rate must be nonnegative")
    sx = pauli_operator("x", 0, 1).mat
    sy = pauli_operator("y", 0, 1).mat
    c_ops = (pauli_operator("plus", 0, 1).mat, pauli_operator("minus", 0, 1).mat)
    lind = OperatorSet(
        h0=np.zeros((2, 2)), controls=(sx, sy), c_ops=c_ops,
        noise=NoiseMatrix.scaled_identity(noise_rate, 2),
    )
    unrav = nmr_transform(1, noise_rate)
    cost = CostSpec(
        q=q_weight, r_matrix=r_weight * np.eye(2),
        target=target if target is not None else y_state(), end_cost=end_cost,
    )
    return ProblemBundle(np.zeros((2, 2)), unrav, cost, plus_state(), lind, frame="none")


def nmr_coupling_hamiltonian(params: NmrParams) -> np.ndarray:
    """Pairwise zz coupling drift, (pi/2) J_ij sigma_i^z sigma_j^z summed over i<j."""
    n = params.n_qubits
    h = np.zeros((2 ** n, 2 ** n), dtype=complex)
    sz = pauli_operator("z", 0, 1)
    for i in range(n):
        for j in range(i + 1, n):
            if params.couplings[i, j] == 0.0:
                continue
            h += (np.pi / 2) * params.couplings[i, j] * tensor_chain([(sz, i), (sz, j)], n).mat
    return h


def nmr_shift_hamiltonian(params: NmrParams) -> np.ndarray:
    """Chemical shift drift, pi nu_i sigma_i^z summed over qubits."""
    n = params.n_qubits
    h = np.zeros((2 ** n, 2 ** n), dtype=complex)
    for i, nu in enumerate(params.shifts):
        h += np.pi * nu * pauli_operator("z", i, n).mat
    return h


def nmr_control_ops(n_qubits: int) -> tuple:
    """Per-qubit x and y generators, channel order (q0 x, q0 y, q1 x, ...)."""
    ops = []
    for q in range(n_qubits):
        for axis in ("x", "y"):
            ops.append(pauli_operator(axis, q, n_qubits).mat)
    return tuple(ops)


def build_nmr(params: NmrParams, noise_rate: float, r_weight: float, q_weight: float,
              horizon: float, frame: str = "rotating", target: QuantumState | None = None,
              end_cost: str = "linear") -> ProblemBundle:
    """Spin molecule with per-qubit xy drives and per-qubit relaxation.

    In the rotating frame the shift Hamiltonian is absent and the default
    target is the entangled pair-phase state matching the horizon; in the lab
    frame the full drift acts and the default target is the plain GHZ state.
    The control weight is spread per channel (r_weight / n_channels).
    """
    n = params.n_qubits
    n_c = 2 * n
    if frame not in ("rotating", "lab"):
        raise ValueError(f"unknown frame {frame!r}")
    h0 = nmr_coupling_hamiltonian(params)
    if frame == "lab":
        h0 = h0 + nmr_shift_hamiltonian(params)
        default_target = ghz_state(n)
    else:
        default_target = ghz_target_rotating(n, params.shifts, horizon)
    lind = OperatorSet(
        h0=h0, controls=nmr_control_ops(n), c_ops=nmr_ladder_ops(n),
        noise=NoiseMatrix.scaled_identity(noise_rate, n_c),
    )
    unrav = nmr_transform(n, noise_rate)
    cost = CostSpec(
        q=q_weight, r_matrix=(r_weight / n_c) * np.eye(n_c),
        target=target if target is not None else default_target, end_cost=end_cost,
    )
    return ProblemBundle(h0, unrav, cost, basis_state(n, 0), lind, frame=frame)


def ghz_target_rotating(n_qubits: int, shifts, horizon: float) -> QuantumState:
    """GHZ state carried into the rotating frame at the final time.

    The basis states of all spins up / all spins down acquire opposite
    phases 2 pi omega T with omega half the summed shifts; the state equals
    the plain GHZ state whenever omega * horizon is an integer.
    """
    if n_qubits < 1:
        raise ValueError("need at least one qubit")
    omega = 0.5 * float(np.sum(shifts))
    amps = np.zeros(2 ** n_qubits, dtype=complex)
    amps[0] = np.exp(2j * np.pi * omega * horizon) / np.sqrt(2)
    amps[-1] = np.exp(-2j * np.pi * omega * horizon) / np.sqrt(2)
    return QuantumState(amps)


def rotating_frame_controls(schedule: ControlSchedule, shifts, direction: str) -> ControlSchedule:
    """Rotate per-qubit (x, y) pulse pairs between lab and rotating frames.

    The rotation angle is evaluated at each bin midpoint.  ``to_rot`` maps
    lab-frame pulses to rotating-frame ones; ``to_lab`` applies the inverse.
    Round-tripping is exact because the per-qubit mixing is orthogonal.
    """
    if direction not in ("to_rot", "to_lab"):
        raise ValueError(f"unknown direction {direction!r}")
    pulses = schedule.pulses
    n_qubits = len(tuple(shifts))
    if pulses.shape[0] != 2 * n_qubits:
        raise ValueError("schedule channels are not paired (x, y) per qubit")
    t = schedule.grid.bin_midpoints
    out = np.empty_like(pulses)
    for i, nu in enumerate(shifts):
        c = np.cos(2 * np.pi * nu * t)
        s = np.sin(2 * np.pi * nu * t)
        ux, uy = pulses[2 * i], pulses[2 * i + 1]
        if direction == "to_rot":
            out[2 * i] = c * ux + s * uy
            out[2 * i + 1] = -s * ux + c * uy
        else:
            out[2 * i] = c * ux - s * uy
            out[2 * i + 1] = s * ux + c * uy
    return ControlSchedule(out, schedule.grid)


def spin_chain_control_ops(n_qubits: int) -> tuple:
    """Single-site xy generators followed by nearest-neighbour products."""
    ops = list(nmr_control_ops(n_qubits))
    for q in range(n_qubits - 1):
        for a in ("x", "y"):
            for b in ("x", "y"):
                ops.append(tensor_chain(
                    [(pauli_operator(a, 0, 1), q), (pauli_operator(b, 0, 1), q + 1)],
                    n_qubits).mat)
    return tuple(ops)


def build_spin_chain(n_qubits: int, rate_single: float, r_weight: float,
                     q_weight: float, target: QuantumState | None = None,
                     end_cost: str = "linear") -> ProblemBundle:
    """Drift-free chain with site and nearest-neighbour controls and dissipation.

    The pair dissipation rate is fixed at twice the single-site rate: with
    the per-channel control weight r_weight / n_channels that is the unique
    choice making the weight-covariance product a multiple of the identity.
    """
    if n_qubits < 2:
        raise ValueError("chain needs at least two qubits")
    rate_pair = 2.0 * rate_single
    n_c = 2 * n_qubits + 4 * (n_qubits - 1)
    diag = np.concatenate([
        np.full(2 * n_qubits, rate_single),
        np.full(4 * (n_qubits - 1), rate_pair),
    ])
    dim = 2 ** n_qubits
    lind = OperatorSet(
        h0=np.zeros((dim, dim)), controls=spin_chain_control_ops(n_qubits),
        c_ops=spin_chain_ladder_ops(n_qubits), noise=NoiseMatrix(np.diag(diag)),
    )
    unrav = spin_chain_transform(n_qubits, rate_single, rate_pair)
    cost = CostSpec(
        q=q_weight, r_matrix=(r_weight / n_c) * np.eye(n_c),
        target=target if target is not None else ghz_state(n_qubits), end_cost=end_cost,
    )
    return ProblemBundle(np.zeros((dim, dim)), unrav, cost, basis_state(n_qubits, 0),
                         lind, frame="none")


def unitary_transfer_eval(schedule: ControlSchedule, bundle: ProblemBundle) -> float:
    """Fidelity of the pulse set driving the noiseless dynamics.

    Propagates the bundle's initial state under drift plus controls with the
    environment coupling removed (exact per-bin matrix exponentials) and
    returns the squared overlap with the cost target at the final time.
    """
    h_ops = bundle.unraveling.hermitian_generators()
    if schedule.pulses.shape[0] != h_ops.shape[0]:
        raise ValueError("schedule channels do not match the problem controls")
    psi = bundle.psi0.amplitudes.copy()
    dtau = schedule.grid.bin_width
    for k in range(schedule.grid.n_bins):
        h = bundle.h0 + np.tensordot(schedule.pulses[:, k], h_ops, axes=1)
        psi = sla.expm(-1j * h * dtau) @ psi
    return fidelity(QuantumState.normalized(psi), bundle.cost.target)
