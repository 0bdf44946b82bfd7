"""First-order gradient baseline on the master equation.

Forward states and backward adjoint states are propagated per time step by
exponentiating the step-constant generator.  The exponential acts on the
density matrix directly through a compensated Taylor series of
left/right multiplications, so no superoperator of squared dimension is
ever formed; the series is exact to roundoff for the step sizes used here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .picontrol import CostSpec
from .qcore import OperatorSet, QuantumState
from .sse import TimeGrid


@njit(cache=True)
def _gen_apply(kl, kr, c_left, c_right, dmat, x):
    out = kl @ x + x @ kr
    for a in range(c_left.shape[0]):
        for b in range(c_left.shape[0]):
            dab = dmat[a, b]
            if dab != 0.0:
                out += dab * (c_left[a] @ x @ c_right[b])
    return out


@njit(cache=True)
def _expm_apply(kl, kr, c_left, c_right, dmat, x, dt, substeps, tol, max_terms):
    y = x.copy()
    tau = dt / substeps
    for _ in range(substeps):
        acc = y.copy()
        term = y.copy()
        for k in range(1, max_terms + 1):
            term = _gen_apply(kl, kr, c_left, c_right, dmat, term) * (tau / k)
            acc = acc + term
            if np.abs(term).max() < tol * max(np.abs(acc).max(), 1e-30):
                break
        y = acc
    return y


class _Propagator:
    """Per-problem constants for the step propagator and its adjoint."""

    def __init__(self, op_set: OperatorSet):
        self.cs = np.ascontiguousarray(np.stack(op_set.c_ops)) if op_set.c_ops \
            else np.zeros((0,) + (op_set.dim,) * 2, dtype=complex)
        self.csd = np.ascontiguousarray(np.conj(np.transpose(self.cs, (0, 2, 1))))
        self.dmat = np.ascontiguousarray(op_set.noise.mat)
        anti = np.zeros((op_set.dim,) * 2, dtype=complex)
        for a in range(self.cs.shape[0]):
            for b in range(self.cs.shape[0]):
                if self.dmat[a, b]:
                    anti += self.dmat[a, b] * (self.csd[b] @ self.cs[a])
        self.anti = anti
        diss_norm = sum(
            abs(self.dmat[a, b]) * np.linalg.norm(self.cs[a]) * np.linalg.norm(self.cs[b])
            for a in range(self.cs.shape[0]) for b in range(self.cs.shape[0])
        )
        self.diss_norm = 2.0 * diss_norm

    def keff(self, h: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(-1j * h - 0.5 * self.anti)

    def substeps(self, h: np.ndarray, dt: float) -> int:
        bound = 2.0 * np.linalg.norm(h) + self.diss_norm
        return max(1, int(np.ceil(bound * dt)))

    def step(self, h, rho, dt):
        k = self.keff(h)
        return _expm_apply(k, k.conj().T, self.cs, self.csd, self.dmat,
                           np.ascontiguousarray(rho), dt, self.substeps(h, dt), 1e-15, 60)

    def step_adjoint(self, h, x, dt):
        k = self.keff(h)
        return _expm_apply(k.conj().T, k, self.csd, self.cs, self.dmat,
                           np.ascontiguousarray(x), dt, self.substeps(h, dt), 1e-15, 60)


def _bin_hamiltonians(op_set: OperatorSet, pulses: np.ndarray) -> list:
    return [op_set.h0 + sum(u * hc for u, hc in zip(pulses[:, k], op_set.controls))
            for k in range(pulses.shape[1])]


def forward_backward(op_set: OperatorSet, pulses: np.ndarray, grid: TimeGrid,
                     rho0: np.ndarray, rho_target: np.ndarray):
    """States and adjoint states at every grid time under one pulse set.

    The forward list propagates the initial matrix, the backward list pulls
    the target back through the adjoint generator; both are sampled at all
    step edges (every control-bin edge is one of them).
    """
    pulses = np.atleast_2d(np.asarray(pulses, dtype=float))
    if pulses.shape != (op_set.n_controls, grid.n_bins):
        raise ValueError("pulse matrix does not align with the problem and grid")
    prop = _Propagator(op_set)
    hs = _bin_hamiltonians(op_set, pulses)
    nt = grid.n_steps
    bin_of = grid.bin_of_step
    rhos = np.empty((nt + 1, op_set.dim, op_set.dim), dtype=complex)
    lams = np.empty_like(rhos)
    rhos[0] = rho0
    for j in range(nt):
        rhos[j + 1] = prop.step(hs[bin_of[j]], rhos[j], grid.dt)
    lams[nt] = rho_target
    for j in range(nt, 0, -1):
        lams[j - 1] = prop.step_adjoint(hs[bin_of[j - 1]], lams[j], grid.dt)
    return rhos, lams


def lindblad_cost(op_set: OperatorSet, pulses: np.ndarray, grid: TimeGrid,
                  rho0: np.ndarray, rho_target: np.ndarray, q: float,
                  r_matrix: np.ndarray) -> float:
    """Deterministic objective: -(q/2) tr(rho_T rho_target) + quadratic term."""
    pulses = np.atleast_2d(np.asarray(pulses, dtype=float))
    prop = _Propagator(op_set)
    hs = _bin_hamiltonians(op_set, pulses)
    rho = np.asarray(rho0, dtype=complex)
    bin_of = grid.bin_of_step
    for j in range(grid.n_steps):
        rho = prop.step(hs[bin_of[j]], rho, grid.dt)
    fid = float(np.real(np.trace(rho @ rho_target)))
    ru = np.asarray(r_matrix, dtype=float) @ pulses
    quad = 0.5 * float(np.sum(pulses * ru)) * grid.bin_width
    return -(q / 2.0) * fid + quad


def deterministic_cost_fn(bundle, grid: TimeGrid):
    """Closure evaluating the master-equation objective of a pulse matrix."""
    rho0 = bundle.psi0.density()
    rho_t = bundle.cost.target.density()

    def cost_fn(pulses: np.ndarray) -> float:
        return lindblad_cost(bundle.lindblad, pulses, grid, rho0, rho_t,
                             bundle.cost.q, bundle.cost.r_matrix)

    return cost_fn


def grape_gradient(op_set: OperatorSet, pulses: np.ndarray, grid: TimeGrid,
                   rhos: np.ndarray, lams: np.ndarray, q: float,
                   r_matrix: np.ndarray) -> np.ndarray:
    """First-order objective gradient per control and bin.

    The fidelity term is (i q / 2) tr(lambda_t [H_a, rho_t]) integrated over
    each bin (trapezoid over the step samples); the quadratic term contributes
    R u times the bin width exactly.
    """
    pulses = np.atleast_2d(np.asarray(pulses, dtype=float))
    spb = grid.steps_per_bin
    grad = np.empty((op_set.n_controls, grid.n_bins))
    for a, ha in enumerate(op_set.controls):
        comm = ha[None] @ rhos - rhos @ ha[None]
        g = np.real(0.5j * q * np.einsum("tij,tji->t", lams, comm))
        for k in range(grid.n_bins):
            seg = g[k * spb:(k + 1) * spb + 1]
            grad[a, k] = (seg.sum() - 0.5 * (seg[0] + seg[-1])) * grid.dt
    grad += (np.asarray(r_matrix, dtype=float) @ pulses) * grid.bin_width
    return grad


@dataclass
class GrapeState:
    """Result of one gradient descent run."""

    pulses: np.ndarray
    eps: float
    reductions_last: int
    cost_trace: np.ndarray
    n_iterations: int
    terminated: bool  # True when the backoff could not find a descent step


def grape_optimize(op_set: OperatorSet, cost: CostSpec, pulses0: np.ndarray,
                   grid: TimeGrid, psi0: QuantumState, eps0: float = 0.1,
                   max_iter: int = 1000) -> GrapeState:
    """Gradient descent with multiplicative learning-rate backoff.

    Whenever a step does not lower the cost the rate is divided by ten and
    the step recomputed, at most ten times; exhausting the backoff ends the
    run.  The reduced rate carries over to later iterations, so accepted
    costs decrease monotonically.
    """
    if eps0 <= 0:
        raise ValueError("initial learning rate must be positive")
    if cost.end_cost != "linear":
        raise ValueError("the gradient baseline handles the linear end cost only")
    pulses = np.array(pulses0, dtype=float)
    rho0 = psi0.density()
    rho_t = cost.target.density()
    current = lindblad_cost(op_set, pulses, grid, rho0, rho_t, cost.q, cost.r_matrix)
    trace = [current]
    eps = eps0
    nred = 0
    terminated = False
    it = 0
    for it in range(1, max_iter + 1):
        rhos, lams = forward_backward(op_set, pulses, grid, rho0, rho_t)
        grad = grape_gradient(op_set, pulses, grid, rhos, lams, cost.q, cost.r_matrix)
        trial = pulses - eps * grad
        trial_cost = lindblad_cost(op_set, trial, grid, rho0, rho_t, cost.q, cost.r_matrix)
        nred = 0
        while trial_cost >= current and nred < 10:
            eps /= 10.0
            nred += 1
            trial = pulses - eps * grad
            trial_cost = lindblad_cost(op_set, trial, grid, rho0, rho_t, cost.q, cost.r_matrix)
        if trial_cost >= current:
            terminated = True
            break
        pulses, current = trial, trial_cost
        trace.append(current)
    return GrapeState(pulses=pulses, eps=eps, reductions_last=nred,
                      cost_trace=np.array(trace), n_iterations=it,
                      terminated=terminated)


BENCHMARK_SEED_FAMILIES = (
    ("normal", 0.0, 2.0),
    ("normal", 1.0, 2.0),
    ("normal", -1.0, 2.0),
    ("uniform", -10, 10, 1.0),
    ("uniform", -10, 10, 0.5),
)


def seed_schedules(kind, count: int, n_channels: int, n_bins: int, seed: int) -> np.ndarray:
    """Random starting schedules, shape (count, n_channels, n_bins).

    ``kind`` is ("normal", mu, sigma) or ("uniform", lo, hi, scale); the
    uniform family draws integers in [lo, hi] and multiplies by the scale.
    """
    rng = np.random.default_rng(seed)
    shape = (count, n_channels, n_bins)
    if kind[0] == "normal":
        _, mu, sigma = kind
        return rng.normal(mu, sigma, shape)
    if kind[0] == "uniform":
        _, lo, hi, scale = kind
        return rng.integers(int(lo), int(hi) + 1, shape).astype(float) * scale
    raise ValueError(f"unknown seed family {kind!r}")
