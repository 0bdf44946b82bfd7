"""Euler-Maruyama simulation of stochastic Schroedinger trajectories.

Two unravelings of the same master equation are implemented: the general
nonlinear one driven by the raw dissipation operators, and the linear
norm-preserving one obtained after mixing the dissipators into
anti-Hermitian form (see :mod:`qdc.gauge`).  The linear form is the
workhorse of the sampling optimizer, so its batch path is vectorized over
trajectories.

Noise streams are counter-based: the batch for importance-sampling
iteration ``p`` comes from one Philox generator keyed by
``(base_seed, p)``, and trajectory ``i`` owns row ``i`` of that stream.
The rows are prefix-stable, so trajectory ``i``'s increments are a pure
function of ``(base_seed, p, i)`` no matter how many trajectories are
drawn or how the batch is chunked over workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .qcore import NoiseMatrix, QuantumState, as_matrix, state_fidelities


@dataclass(frozen=True)
class TimeGrid:
    """Uniform integration grid with an aligned coarser control binning."""

    horizon: float
    n_steps: int
    n_bins: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1 or self.n_bins < 1:
            raise ValueError("step and bin counts must be positive")
        if self.n_steps % self.n_bins:
            raise ValueError(
                f"n_steps={self.n_steps} is not a multiple of n_bins={self.n_bins}"
            )

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def bin_width(self) -> float:
        return self.horizon / self.n_bins

    @property
    def steps_per_bin(self) -> int:
        return self.n_steps // self.n_bins

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    @cached_property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_bins + 1)

    @cached_property
    def bin_midpoints(self) -> np.ndarray:
        e = self.bin_edges
        return 0.5 * (e[:-1] + e[1:])

    @cached_property
    def bin_of_step(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_bins), self.steps_per_bin)


@dataclass(frozen=True)
class NoisePath:
    """Wiener increments of one trajectory on the integration grid."""

    increments: np.ndarray  # (n_steps, n_channels), units sqrt(time)
    grid: TimeGrid

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        object.__setattr__(self, "increments", inc)
        if inc.shape[0] != self.grid.n_steps:
            raise ValueError("increment count does not match the grid")

    @property
    def n_channels(self) -> int:
        return self.increments.shape[1]

    @cached_property
    def binned(self) -> np.ndarray:
        """Exact per-bin sums of the increments, shape (n_bins, n_channels)."""
        g = self.grid
        return self.increments.reshape(g.n_bins, g.steps_per_bin, -1).sum(axis=1)


@dataclass
class Trajectory:
    final_state: QuantumState
    fidelity_end: float
    quadratic_cost: float
    stochastic_cost: float
    noise: NoisePath


@dataclass
class TrajectoryBatch:
    """Sufficient statistics of one batch of controlled trajectories."""

    final_states: np.ndarray        # (n_traj, N)
    fidelities: np.ndarray          # (n_traj,)
    quadratic_cost: float           # shared by every trajectory (open loop)
    stochastic_costs: np.ndarray    # (n_traj,)
    binned_noise: np.ndarray        # (n_traj, n_bins, n_channels)
    increments: np.ndarray          # (n_traj, n_steps, n_channels)
    grid: TimeGrid
    costs: np.ndarray | None = None     # filled by the cost layer
    weights: np.ndarray | None = None
    ess: float | None = None
    densities: np.ndarray | None = None  # (n_steps + 1, N, N) when recorded

    @property
    def n_traj(self) -> int:
        return self.final_states.shape[0]


def _philox_stream(base_seed: int, iteration: int) -> np.random.Generator:
    key = np.array([np.uint64(base_seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(iteration & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_noise(d_tilde: NoiseMatrix, grid: TimeGrid, seed: int) -> NoisePath:
    """Gaussian increments with per-step covariance d_tilde * dt, fixed by seed."""
    inc = batch_noise(d_tilde, grid, seed, iteration=0, n_traj=1)[0]
    return NoisePath(inc, grid)


def batch_noise(d_tilde: NoiseMatrix, grid: TimeGrid, base_seed: int,
                iteration: int, n_traj: int) -> np.ndarray:
    """Increment array (n_traj, n_steps, n_channels); row i is trajectory i's path."""
    nc = d_tilde.n_channels
    gen = _philox_stream(base_seed, iteration)
    raw = gen.standard_normal((n_traj, grid.n_steps, nc))
    factor = d_tilde.factor() * np.sqrt(grid.dt)
    if np.allclose(factor, np.diag(np.diagonal(factor))):
        return raw * np.diagonal(factor)
    return raw @ factor.T


@dataclass(frozen=True)
class LinearSSE:
    """Precomputed arrays for stepping the linear norm-preserving unraveling."""

    drift: np.ndarray   # -i H0 - 1/2 sum_ab Dt_ab H_a H_b
    gens: np.ndarray    # stack of -i H_a, shape (n_channels, N, N)
    d_tilde: NoiseMatrix

    @property
    def dim(self) -> int:
        return self.drift.shape[0]

    @property
    def n_channels(self) -> int:
        return self.gens.shape[0]


def make_linear_sse(h0, unraveling, d_override: NoiseMatrix | None = None) -> LinearSSE:
    """Assemble the drift and diffusion generators of the linear unraveling.

    ``d_override`` substitutes a different noise matrix (same channel count),
    which is how the annealing loop rescales the environment coupling.
    """
    h0 = np.asarray(as_matrix(h0), dtype=complex)
    h_ops = unraveling.hermitian_generators()
    d_t = d_override if d_override is not None else unraveling.d_tilde
    if d_t.n_channels != h_ops.shape[0]:
        raise ValueError("noise override has the wrong channel count")
    dmat = d_t.mat
    drift = -1j * h0
    diag = np.diagonal(dmat)
    if np.allclose(dmat, np.diag(diag)):
        for a in range(h_ops.shape[0]):
            if diag[a]:
                drift = drift - 0.5 * diag[a] * (h_ops[a] @ h_ops[a])
    else:
        for a in range(h_ops.shape[0]):
            for b in range(h_ops.shape[0]):
                if dmat[a, b]:
                    drift = drift - 0.5 * dmat[a, b] * (h_ops[a] @ h_ops[b])
    return LinearSSE(drift, -1j * h_ops, d_t)


def step_linear(psi: np.ndarray, h0, h_ops, u_k: np.ndarray, d_tilde: NoiseMatrix,
                dw: np.ndarray, dt: float, renormalize: bool = True) -> np.ndarray:
    """One Euler-Maruyama step of the linear unraveling for a single state."""
    ops = make_linear_sse(h0, _AdHocUnraveling(h_ops, d_tilde))
    out = psi + ops.drift @ psi * dt
    coef = np.asarray(u_k, dtype=float) * dt + np.asarray(dw, dtype=float)
    for a in range(ops.n_channels):
        out = out + coef[a] * (ops.gens[a] @ psi)
    if renormalize:
        out = out / np.linalg.norm(out)
    return out


class _AdHocUnraveling:
    """Duck-typed stand-in so step_linear can reuse make_linear_sse."""

    def __init__(self, h_ops, d_tilde):
        self._h = np.stack([np.asarray(as_matrix(h), dtype=complex) for h in h_ops])
        self.d_tilde = d_tilde

    def hermitian_generators(self):
        return self._h


def step_nonlinear(psi: np.ndarray, h, c_ops, noise: NoiseMatrix, dw: np.ndarray,
                   dt: float, renormalize: bool = True) -> np.ndarray:
    """One Euler-Maruyama step of the nonlinear unraveling for a single state.

    Includes the state-dependent expectation terms that keep the continuum
    equation norm preserving; the discrete step still drifts at O(dt), which
    the explicit renormalization removes.
    """
    h = np.asarray(as_matrix(h), dtype=complex)
    cs = np.stack([np.asarray(as_matrix(c), dtype=complex) for c in c_ops])
    d = noise.mat
    c_exp = np.array([np.vdot(psi, 0.5 * (c + c.conj().T) @ psi).real for c in cs])
    cpsi = np.stack([c @ psi for c in cs])
    drift = -1j * (h @ psi)
    for a in range(len(cs)):
        for b in range(len(cs)):
            dab = d[a, b]
            if dab == 0.0:
                continue
            drift = drift - 0.5 * dab * (
                cs[b].conj().T @ cpsi[a]
                - 2.0 * c_exp[a] * cpsi[b]
                + c_exp[a] * c_exp[b] * psi
            )
    dw = np.asarray(dw, dtype=float)
    out = psi + drift * dt + np.einsum("a,ai->i", dw, cpsi) - (dw @ c_exp) * psi
    if renormalize:
        out = out / np.linalg.norm(out)
    return out


def _simulate_linear_chunk(ops, pulses, grid, noise, psi0, record_density):
    n = noise.shape[0]
    psis = np.tile(psi0, (n, 1))
    dt = grid.dt
    bin_of = grid.bin_of_step
    dens = None
    if record_density:
        dens = np.zeros((grid.n_steps + 1, ops.dim, ops.dim), dtype=complex)
        dens[0] = np.einsum("ti,tj->ij", psis, psis.conj())
    drift_dt = LinearSSE(ops.drift * dt, ops.gens, ops.d_tilde)
    for j in range(grid.n_steps):
        coef = pulses[:, bin_of[j]] * dt + noise[:, j, :]
        gpsi = np.tensordot(psis, drift_dt.gens, axes=([1], [2]))
        psis = psis + psis @ drift_dt.drift.T + np.einsum("ta,tai->ti", coef, gpsi)
        psis /= np.linalg.norm(psis, axis=1, keepdims=True)
        if record_density:
            dens[j + 1] = np.einsum("ti,tj->ij", psis, psis.conj())
    return psis, dens


def simulate_batch(ops: LinearSSE, pulses: np.ndarray, grid: TimeGrid,
                   noise: np.ndarray, psi0: QuantumState, target: QuantumState,
                   r_matrix: np.ndarray, record_density: bool = False,
                   n_workers: int = 1) -> TrajectoryBatch:
    """Propagate a batch of trajectories under one piecewise-constant pulse set.

    ``noise`` is the full increment array from :func:`batch_noise`.  The same
    increments feed both the dynamics and the cost bookkeeping, so the path
    costs and the importance-sampling statistics always refer to identical
    noise realizations.  Chunking over ``n_workers`` threads does not change
    the result.
    """
    pulses = np.asarray(pulses, dtype=float)
    n_traj = noise.shape[0]
    psi0v = psi0.amplitudes
    if n_workers <= 1 or n_traj < 2 * n_workers:
        finals, dens = _simulate_linear_chunk(ops, pulses, grid, noise, psi0v, record_density)
    else:
        bounds = np.linspace(0, n_traj, n_workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(
                lambda se: _simulate_linear_chunk(ops, pulses, grid, noise[se[0]:se[1]], psi0v, record_density),
                zip(bounds[:-1], bounds[1:]),
            ))
        finals = np.concatenate([p[0] for p in parts])
        dens = None
        if record_density:
            dens = sum(p[1] for p in parts)  # chunks hold unnormalized sums
    fids = state_fidelities(finals, target.amplitudes)
    binned = noise.reshape(n_traj, grid.n_bins, grid.steps_per_bin, -1).sum(axis=2)
    quad, stoch = control_costs(pulses, r_matrix, grid, binned)
    if record_density and dens is not None:
        dens = dens / n_traj
    return TrajectoryBatch(
        final_states=finals, fidelities=fids, quadratic_cost=quad,
        stochastic_costs=stoch, binned_noise=binned, increments=noise,
        grid=grid, densities=dens,
    )


def control_costs(pulses: np.ndarray, r_matrix: np.ndarray, grid: TimeGrid,
                  binned_noise: np.ndarray):
    """Quadratic control cost and per-trajectory stochastic cost terms.

    quadratic = 1/2 sum_k u_k^T R u_k * bin_width, one number for the batch;
    stochastic_i = sum_k u_k^T R dW_{ik}, one number per trajectory.
    """
    r = np.asarray(r_matrix, dtype=float)
    ru = r @ pulses                                   # (n_channels, n_bins)
    quad = 0.5 * float(np.sum(pulses * ru)) * grid.bin_width
    stoch = np.einsum("ak,tka->t", ru, binned_noise)
    return quad, stoch


def simulate_trajectory(h0, unraveling, pulses: np.ndarray, grid: TimeGrid,
                        noise: NoisePath, psi0: QuantumState, target: QuantumState,
                        r_matrix: np.ndarray) -> Trajectory:
    """Single-trajectory convenience wrapper around the batch path."""
    ops = make_linear_sse(h0, unraveling)
    batch = simulate_batch(ops, pulses, grid, noise.increments[None], psi0,
                           target, r_matrix)
    return Trajectory(
        final_state=QuantumState(batch.final_states[0]),
        fidelity_end=float(batch.fidelities[0]),
        quadratic_cost=batch.quadratic_cost,
        stochastic_cost=float(batch.stochastic_costs[0]),
        noise=noise,
    )


def simulate_batch_nonlinear(op_set, pulses: np.ndarray, grid: TimeGrid,
                             noise: np.ndarray, psi0: QuantumState,
                             record_density: bool = False):
    """Batch propagation of the nonlinear unraveling (raw dissipators).

    Used to check that both unravelings of one master equation produce the
    same trajectory-averaged density matrix.  ``noise`` must carry the
    covariance of the untransformed noise matrix.  Returns (final_states,
    densities or None).
    """
    pulses = np.atleast_2d(np.asarray(pulses, dtype=float))
    h0 = op_set.h0
    hcs = np.stack(op_set.controls) if op_set.controls else np.zeros((0,) + h0.shape)
    cs = np.stack(op_set.c_ops)
    chs = 0.5 * (cs + np.conj(np.transpose(cs, (0, 2, 1))))
    d = op_set.noise.mat
    cc = np.einsum("ab,bji,ajk->ik", d, cs.conj(), cs)  # sum_ab D_ab C_b^dag C_a
    n = noise.shape[0]
    psis = np.tile(psi0.amplitudes, (n, 1))
    dens = None
    if record_density:
        dens = np.zeros((grid.n_steps + 1, h0.shape[0], h0.shape[0]), dtype=complex)
        dens[0] = np.einsum("ti,tj->ij", psis, psis.conj()) / n
    dt = grid.dt
    bin_of = grid.bin_of_step
    for j in range(grid.n_steps):
        k = bin_of[j]
        h = h0 + np.tensordot(pulses[:, k], hcs, axes=1) if hcs.size else h0
        c_exp = np.einsum("ti,aij,tj->ta", psis.conj(), chs, psis).real
        cpsi = np.tensordot(psis, cs, axes=([1], [2]))     # (t, a, i)
        dc = c_exp @ d                                     # (t, b): sum_a c_a D_ab
        drift = (
            -1j * psis @ h.T
            - 0.5 * (psis @ cc.T)
            + np.einsum("tb,tbi->ti", dc, cpsi)
            - 0.5 * np.einsum("tb,tb->t", dc, c_exp)[:, None] * psis
        )
        dw = noise[:, j, :]
        diff = np.einsum("ta,tai->ti", dw, cpsi) - np.einsum("ta,ta->t", dw, c_exp)[:, None] * psis
        psis = psis + drift * dt + diff
        psis /= np.linalg.norm(psis, axis=1, keepdims=True)
        if record_density:
            dens[j + 1] = np.einsum("ti,tj->ij", psis, psis.conj()) / n
    return psis, dens
