"""Adaptive importance sampling of open-loop controls.

The optimizer never evaluates gradients.  Each iteration simulates a batch
of stochastic trajectories under the current sampling control, weights them
by the exponentiated path cost, and moves every pulse bin by the weighted
average noise slope accumulated in that bin.  The optimum is the fixed
point of this map, at which the weights become uniform and the effective
sample size approaches one.

All exponentials of -S/lambda go through a max shift: at the coupling
strengths used here (lambda of order 1e-3) raw exponentials overflow
immediately.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import make_lsq_spline
from scipy.special import logsumexp

from .qcore import NoiseMatrix, QuantumState
from .sse import TimeGrid, Trajectory, TrajectoryBatch, batch_noise, simulate_batch

LOG_COST_CLAMP = 1e-16


class NumericalAbort(RuntimeError):
    """Raised when a trace turns NaN; carries the iteration index."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class CostSpec:
    """Objective definition: fidelity weight, control weight and target state.

    ``end_cost`` selects the terminal term: ``linear`` uses -(Q/2) F, while
    ``logarithmic`` uses (Q/2) log(1 - F) with the argument clamped at
    ``LOG_COST_CLAMP`` (the clamp count is reported by the run).  The
    state-dependent path cost is fixed at zero.
    """

    q: float
    r_matrix: np.ndarray
    target: QuantumState
    end_cost: str = "linear"

    def __post_init__(self):
        r = np.asarray(self.r_matrix, dtype=float)
        if r.ndim == 0:
            raise ValueError("r_matrix must be a matrix; scale an identity explicitly")
        object.__setattr__(self, "r_matrix", r)
        if self.q < 0:
            raise ValueError("fidelity weight must be nonnegative")
        if np.abs(r - r.T).max() > 1e-12 * max(np.abs(r).max(), 1.0):
            raise ValueError("control weight matrix must be symmetric")
        if np.linalg.eigvalsh(r).min() <= 0:
            raise ValueError("control weight matrix must be positive definite")
        if self.end_cost not in ("linear", "logarithmic"):
            raise ValueError(f"unknown end cost form {self.end_cost!r}")

    @property
    def n_channels(self) -> int:
        return self.r_matrix.shape[0]

    def terminal(self, fidelities: np.ndarray):
        """Terminal cost values and the number of clamped arguments."""
        f = np.asarray(fidelities, dtype=float)
        if self.end_cost == "linear":
            return -(self.q / 2.0) * f, 0
        gap = 1.0 - f
        clamped = int(np.count_nonzero(gap < LOG_COST_CLAMP))
        return (self.q / 2.0) * np.log(np.clip(gap, LOG_COST_CLAMP, None)), clamped


@dataclass(frozen=True)
class ControlSchedule:
    """Piecewise-constant pulse matrix, one row per channel, one column per bin."""

    pulses: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.pulses, dtype=float))
        object.__setattr__(self, "pulses", p)
        if p.shape[1] != self.grid.n_bins:
            raise ValueError(f"{p.shape[1]} pulse bins do not match grid n_bins={self.grid.n_bins}")
        if not np.all(np.isfinite(p)):
            raise ValueError("pulse matrix contains non-finite entries")

    @property
    def n_channels(self) -> int:
        return self.pulses.shape[0]


def pi_lambda(r_matrix: np.ndarray, d_tilde: NoiseMatrix, tol: float = 1e-10) -> float:
    """Temperature of the sampling formulas, with the compatibility check.

    The product of the control weight matrix and the channel covariance must
    be a positive multiple of the identity; that multiple is the temperature
    entering every exponential weight.
    """
    r = np.asarray(r_matrix, dtype=float)
    prod = r @ d_tilde.mat
    lam = float(np.trace(prod) / prod.shape[0])
    if lam <= 0:
        raise ValueError("control weight times noise covariance must be positive")
    if np.abs(prod - lam * np.eye(prod.shape[0])).max() > tol * max(lam, 1.0):
        raise ValueError("R * D_tilde is not proportional to the identity")
    return lam


def path_cost(traj: Trajectory, cost: CostSpec) -> float:
    """Cost of one realized trajectory: terminal + quadratic + stochastic term."""
    phi, _ = cost.terminal(np.array([traj.fidelity_end]))
    return float(phi[0] + traj.quadratic_cost + traj.stochastic_cost)


def weights_and_ess(costs: np.ndarray, lam: float):
    """Normalized exponential weights and their effective sample size.

    ESS is 1 exactly when all weights are equal and approaches 1/n when a
    single sample dominates.
    """
    s = np.asarray(costs, dtype=float)
    if np.isnan(s).any():
        raise ValueError("cost array contains NaN")
    if not np.any(np.isfinite(s)):
        raise ValueError("no finite cost in the batch")
    logw = -s / lam
    w = np.exp(logw - logsumexp(logw))
    ess = 1.0 / (s.size * float(np.sum(w * w)))
    return w, ess


def cost_to_go_estimate(costs: np.ndarray, lam: float) -> float:
    """Soft minimum -lam * log mean(exp(-S/lam)) of the sampled path costs."""
    s = np.asarray(costs, dtype=float)
    return float(-lam * (logsumexp(-s / lam) - np.log(s.size)))


def batch_evaluate(batch: TrajectoryBatch, cost: CostSpec, lam: float) -> int:
    """Fill the batch's costs, weights and ESS; returns the clamp count."""
    phi, clamped = cost.terminal(batch.fidelities)
    batch.costs = phi + batch.quadratic_cost + batch.stochastic_costs
    batch.weights, batch.ess = weights_and_ess(batch.costs, lam)
    return clamped


def is_update_piecewise(pulses: np.ndarray, batch: TrajectoryBatch) -> np.ndarray:
    """One adaptive importance-sampling step of the piecewise-constant pulses.

    Every bin moves independently by the weighted mean noise slope
    sum_i w_i dW_ik / bin_width accumulated in that bin.
    """
    if batch.weights is None:
        raise ValueError("batch weights not computed")
    kick = np.einsum("t,tka->ak", batch.weights, batch.binned_noise) / batch.grid.bin_width
    return np.asarray(pulses, dtype=float) + kick


@dataclass(frozen=True)
class BasisSet:
    """Time-dependent basis functions for linearly parametrized controls."""

    functions: tuple

    def values(self, grid: TimeGrid) -> np.ndarray:
        """Evaluations at the left step edges (Ito convention), (n_basis, n_steps)."""
        t = grid.times[:-1]
        return np.stack([np.asarray(f(t), dtype=float) for f in self.functions])

    @classmethod
    def indicators(cls, grid: TimeGrid) -> "BasisSet":
        """Indicator functions of the control bins; reproduces the piecewise rule."""
        edges = grid.bin_edges

        def make(k):
            lo, hi = edges[k], edges[k + 1]
            return lambda t: ((t >= lo) & (t < hi)).astype(float)

        return cls(tuple(make(k) for k in range(grid.n_bins)))


def is_update_basis(coeffs: np.ndarray, batch: TrajectoryBatch,
                    basis_values: np.ndarray, ridge: float | None = None) -> np.ndarray:
    """Importance-sampling update of general linear basis coefficients.

    Solves the weighted normal equations built from the basis Gram matrix
    and the weighted basis-noise correlations.  ``ridge`` (default
    1e-8 * trace/dim) regularizes the inversion; an ill-conditioned system
    raises with a hint to increase it or shrink the basis.
    """
    if batch.weights is None:
        raise ValueError("batch weights not computed")
    h = np.asarray(basis_values, dtype=float)
    dt = batch.grid.dt
    gram = (h * dt) @ h.T                                   # int h_k h_k' dt
    corr = np.einsum("t,kj,tja->ak", batch.weights, h, batch.increments)
    if ridge is None:
        ridge = 1e-8 * np.trace(gram) / gram.shape[0]
    system = gram + ridge * np.eye(gram.shape[0])
    if np.linalg.cond(system) > 1e12:
        raise np.linalg.LinAlgError(
            "basis system is ill conditioned; increase the ridge or use fewer basis functions"
        )
    return np.asarray(coeffs, dtype=float) + np.linalg.solve(system.T, corr.T).T


def smooth_window(history: Sequence[np.ndarray], window: int) -> np.ndarray:
    """Mean of the most recent min(window, available) pulse matrices."""
    if len(history) == 0:
        raise ValueError("empty pulse history")
    if window < 1:
        raise ValueError("window must be at least 1")
    take = min(window, len(history))
    recent = list(history)[-take:]
    return np.mean(recent, axis=0)


def spline_smooth(schedule: ControlSchedule, knots: int) -> ControlSchedule:
    """Least-squares cubic-spline fit of each channel, resampled at bin midpoints.

    ``knots`` counts the spline coefficients per channel; ``knots == n_bins``
    is the interpolating limit.
    """
    grid = schedule.grid
    if knots < 4 or knots > grid.n_bins:
        raise ValueError(f"knots must lie in [4, {grid.n_bins}]")
    x = grid.bin_midpoints
    interior = np.linspace(x[0], x[-1], knots - 2)[1:-1]
    tvec = np.r_[[x[0]] * 4, interior, [x[-1]] * 4]
    out = np.empty_like(schedule.pulses)
    for a in range(schedule.n_channels):
        spl = make_lsq_spline(x, schedule.pulses[a], tvec, k=3)
        out[a] = spl(x)
    return ControlSchedule(out, grid)


@dataclass(frozen=True)
class AnnealSchedule:
    """Geometric noise ladder spread evenly over the sampling iterations."""

    d_start: float
    d_final: float
    n_steps: int
    n_is: int

    def __post_init__(self):
        if not (self.d_start >= self.d_final > 0):
            raise ValueError("need d_start >= d_final > 0")
        if self.n_steps < 1 or self.n_is < 1:
            raise ValueError("step counts must be positive")

    def value(self, interval: int) -> float:
        """Noise level of the given ladder interval (1-based)."""
        if not 1 <= interval <= self.n_steps:
            raise ValueError(f"interval {interval} outside 1..{self.n_steps}")
        if self.n_steps == 1:
            return self.d_start
        frac = (interval - 1) / (self.n_steps - 1)
        return self.d_start * (self.d_final / self.d_start) ** frac

    def interval_for(self, iteration: int) -> int:
        """Ladder interval covering the given sampling iteration (both 1-based)."""
        i = 1 + (iteration - 1) * self.n_steps // self.n_is
        return min(i, self.n_steps)


def anneal_value(interval: int, schedule: AnnealSchedule) -> float:
    return schedule.value(interval)


def fluence(schedule: ControlSchedule) -> float:
    """Time-integrated squared pulse amplitude, summed over channels."""
    return float(np.sum(schedule.pulses ** 2) * schedule.grid.bin_width)


def robustness_probe(schedule: ControlSchedule, sigma: float, n_realizations: int,
                     cost_fn: Callable[[np.ndarray], float], seed: int = 0) -> float:
    """Worst cost increase under Gaussian perturbation of every pulse.

    ``cost_fn`` evaluates the deterministic master-equation objective of a
    pulse matrix.  Returns max over realizations of C(u + xi) - C(u) with
    xi i.i.d. N(0, sigma^2).
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    base = cost_fn(schedule.pulses)
    if sigma == 0.0:
        return 0.0
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(n_realizations):
        xi = rng.normal(0.0, sigma, size=schedule.pulses.shape)
        worst = max(worst, cost_fn(schedule.pulses + xi) - base)
    return float(worst)


@dataclass
class ISConfig:
    """Knobs of the sampling loop.

    ``window`` is a step list of (start_iteration, width) pairs; the width of
    the last pair whose start is <= p applies at iteration p.  ``anneal``
    replaces the problem's channel covariance by the ladder value (identity
    times the scalar) and retunes lambda accordingly.
    """

    n_traj: int
    n_is: int
    window: tuple = ((1, 1),)
    spline_knots: int | None = None
    spline_every: int = 1
    anneal: AnnealSchedule | None = None
    stop_fidelity: float | None = None
    early_stop: bool = False
    n_workers: int = 1
    initial_pulses: np.ndarray | None = None

    def __post_init__(self):
        w = tuple((int(s), int(v)) for s, v in self.window)
        if not w or w[0][0] != 1:
            raise ValueError("window step list must start at iteration 1")
        if any(v < 1 for _, v in w):
            raise ValueError("window widths must be >= 1")
        if sorted(s for s, _ in w) != [s for s, _ in w]:
            raise ValueError("window step list must be sorted by start iteration")
        object.__setattr__(self, "window", w)

    def window_at(self, iteration: int) -> int:
        width = self.window[0][1]
        for start, v in self.window:
            if iteration >= start:
                width = v
        return width

    @property
    def max_window(self) -> int:
        return max(v for _, v in self.window)


@dataclass
class ISRun:
    """Traces and final state of one optimization run."""

    f_avg: np.ndarray
    f_min: np.ndarray
    cost: np.ndarray
    ess: np.ndarray
    d_tilde: np.ndarray
    lam: np.ndarray
    seconds: np.ndarray
    final_schedule: ControlSchedule
    n_iterations: int
    clamp_events: int
    stop_reason: str
    seed: int


def optimize(bundle, grid: TimeGrid, config: ISConfig, seed: int,
             metrics_cb: Callable[[dict], None] | None = None) -> ISRun:
    """Run the sample / weight / update loop on a control problem bundle.

    The sampler at iteration p is the window average of the recent pulse
    matrices (optionally spline smoothed); the batch is simulated under that
    sampler, so the weights always refer to the control that generated the
    trajectories.  When annealing is active, the channel covariance and the
    temperature are rebuilt at every ladder change so the compatibility
    condition stays exact.  Any NaN in the traces aborts with the iteration
    index.
    """
    cost = bundle.cost
    n_c = cost.n_channels
    pulses = (np.zeros((n_c, grid.n_bins)) if config.initial_pulses is None
              else np.array(config.initial_pulses, dtype=float))
    if pulses.shape != (n_c, grid.n_bins):
        raise ValueError("initial pulse matrix has the wrong shape")
    history: deque = deque(maxlen=config.max_window)
    history.append(pulses)

    ops = bundle.linear_sse()
    lam = bundle.lam
    d_scalar = float(np.trace(ops.d_tilde.mat) / ops.n_channels)
    interval = None

    rows = {k: [] for k in ("f_avg", "f_min", "cost", "ess", "d", "lam", "sec")}
    clamp_events = 0
    stop_reason = "completed"
    p_done = 0

    for p in range(1, config.n_is + 1):
        t0 = time.perf_counter()
        if config.anneal is not None:
            i = config.anneal.interval_for(p)
            if i != interval:
                interval = i
                d_scalar = config.anneal.value(i)
                d_mat = NoiseMatrix.scaled_identity(d_scalar, n_c)
                ops = bundle.linear_sse(d_override=d_mat)
                lam = pi_lambda(cost.r_matrix, d_mat)

        sampler = smooth_window(history, config.window_at(p))
        if config.spline_knots is not None and p % config.spline_every == 0:
            sampler = spline_smooth(ControlSchedule(sampler, grid), config.spline_knots).pulses

        noise = batch_noise(ops.d_tilde, grid, seed, p, config.n_traj)
        batch = simulate_batch(ops, sampler, grid, noise, bundle.psi0, cost.target,
                               cost.r_matrix, n_workers=config.n_workers)
        try:
            clamp_events += batch_evaluate(batch, cost, lam)
        except ValueError as exc:
            raise NumericalAbort(p, str(exc)) from exc

        f_avg = float(batch.fidelities.mean())
        f_min = float(batch.fidelities.min())
        phi_mean = float(cost.terminal(batch.fidelities)[0].mean())
        c_mean = phi_mean + batch.quadratic_cost
        if not (np.isfinite(f_avg) and np.isfinite(c_mean) and np.isfinite(batch.ess)):
            raise NumericalAbort(p, "non-finite trace value")

        pulses = is_update_piecewise(sampler, batch)
        if np.isnan(pulses).any():
            raise NumericalAbort(p, "NaN in the pulse update")
        history.append(pulses)

        rows["f_avg"].append(f_avg)
        rows["f_min"].append(f_min)
        rows["cost"].append(c_mean)
        rows["ess"].append(batch.ess)
        rows["d"].append(d_scalar)
        rows["lam"].append(lam)
        rows["sec"].append(time.perf_counter() - t0)
        p_done = p
        if metrics_cb is not None:
            metrics_cb({
                "p": p, "F_avg": f_avg, "F_min": f_min, "C": c_mean,
                "ESS": batch.ess, "D_tilde": d_scalar, "lambda": lam,
                "seconds": rows["sec"][-1],
            })

        if config.stop_fidelity is not None and p >= 10 and f_avg > config.stop_fidelity:
            stop_reason = "fidelity threshold"
            break
        if config.early_stop and p >= 100:
            recent = np.mean(rows["ess"][-50:-25])
            latest = np.mean(rows["ess"][-25:])
            if recent > 0 and abs(latest - recent) / recent < 1e-3:
                stop_reason = "ess plateau"
                break

    final = smooth_window(history, config.window_at(p_done))
    if config.spline_knots is not None:
        final = spline_smooth(ControlSchedule(final, grid), config.spline_knots).pulses
    return ISRun(
        f_avg=np.array(rows["f_avg"]), f_min=np.array(rows["f_min"]),
        cost=np.array(rows["cost"]), ess=np.array(rows["ess"]),
        d_tilde=np.array(rows["d"]), lam=np.array(rows["lam"]),
        seconds=np.array(rows["sec"]),
        final_schedule=ControlSchedule(final, grid),
        n_iterations=p_done, clamp_events=clamp_events,
        stop_reason=stop_reason, seed=seed,
    )
