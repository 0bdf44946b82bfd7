"""Command-line front end.

Verbs: optimize, anneal, grape, benchmark, robustness, transfer.  Every run
reads one JSON config, echoes it verbatim into a manifest next to the other
outputs, and stamps each output file with the config hash so results can be
traced back to the exact settings that produced them.

Exit codes: 0 success, 2 config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .grape import (
    BENCHMARK_SEED_FAMILIES,
    deterministic_cost_fn,
    grape_optimize,
    seed_schedules,
)
from .picontrol import (
    AnnealSchedule,
    ControlSchedule,
    ISConfig,
    NumericalAbort,
    fluence,
    optimize,
    robustness_probe,
)
from .problems import (
    NmrParams,
    build_nmr,
    build_noisy_qubit,
    build_spin_chain,
    ghz_state,
    haar_random_state,
    unitary_transfer_eval,
    y_state,
)
from .sse import TimeGrid

METRICS_COLUMNS = ("p", "F_avg", "F_min", "C", "ESS", "D_tilde", "lambda", "seconds")

DESIGN_FLAGS = {
    "renormalize_each_step": True,
    "lambda_tracks_noise": True,
    "log_end_cost_clamp": 1e-16,
    "noise_stream": "philox(base_seed, iteration); trajectory i owns row i",
    "sampler_resimulated_after_smoothing": True,
}


class ConfigError(ValueError):
    pass


def _expect(cfg: dict, key: str, types, where: str, default=...):
    if key not in cfg:
        if default is not ...:
            return default
        raise ConfigError(f"missing field {where}.{key}")
    val = cfg[key]
    if types is not None and not isinstance(val, types):
        raise ConfigError(f"field {where}.{key} has the wrong type")
    return val


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(p) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def build_grid(cfg: dict) -> TimeGrid:
    g = _expect(cfg, "grid", dict, "config")
    horizon = _expect(g, "horizon", (int, float), "grid")
    n_steps = _expect(g, "n_steps", int, "grid")
    n_bins = _expect(g, "n_bins", int, "grid")
    if n_steps % n_bins:
        raise ConfigError(
            f"grid.n_bins={n_bins} must divide grid.n_steps={n_steps}")
    try:
        return TimeGrid(float(horizon), n_steps, n_bins)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _resolve_target(spec, kind: str, n_qubits: int):
    if spec is None:
        return None
    if isinstance(spec, str):
        name = spec.lower()
        if name == "y" and kind == "noisy_qubit":
            return y_state()
        if name == "ghz":
            return ghz_state(n_qubits)
        raise ConfigError(f"unknown target {spec!r} for problem {kind}")
    if isinstance(spec, dict) and "haar_seed" in spec:
        return haar_random_state(n_qubits, int(spec["haar_seed"]))
    raise ConfigError("problem.target must be a name or {'haar_seed': int}")


def build_problem(cfg: dict, grid: TimeGrid):
    p = _expect(cfg, "problem", dict, "config")
    kind = _expect(p, "kind", str, "problem")
    rate = float(_expect(p, "noise_rate", (int, float), "problem"))
    r_weight = float(_expect(p, "r_weight", (int, float), "problem"))
    q_weight = float(_expect(p, "q_weight", (int, float), "problem"))
    end_cost = _expect(p, "end_cost", str, "problem", default="linear")
    try:
        if kind == "noisy_qubit":
            target = _resolve_target(p.get("target"), kind, 1)
            return build_noisy_qubit(rate, r_weight, q_weight, target, end_cost)
        if kind == "nmr":
            params = NmrParams.from_json(_expect(p, "params_file", str, "problem"))
            frame = _expect(p, "frame", str, "problem", default="rotating")
            target = _resolve_target(p.get("target"), kind, params.n_qubits)
            return build_nmr(params, rate, r_weight, q_weight, grid.horizon,
                             frame, target, end_cost)
        if kind == "spin_chain":
            n = _expect(p, "n_qubits", int, "problem")
            target = _resolve_target(p.get("target"), kind, n)
            return build_spin_chain(n, rate, r_weight, q_weight, target, end_cost)
    except (ValueError, OSError, KeyError) as exc:
        raise ConfigError(f"problem construction failed: {exc}") from exc
    raise ConfigError(f"unknown problem kind {kind!r}")


def build_is_config(cfg: dict, threads: int, anneal_required: bool = False) -> ISConfig:
    s = _expect(cfg, "sampling", dict, "config")
    window = _expect(s, "window", list, "sampling", default=[[1, 1]])
    anneal_cfg = cfg.get("anneal")
    anneal = None
    n_is = _expect(s, "n_is", int, "sampling")
    if anneal_required and not anneal_cfg:
        raise ConfigError("this command needs an anneal block in the config")
    if anneal_cfg is not None:
        anneal = AnnealSchedule(
            d_start=float(_expect(anneal_cfg, "d_start", (int, float), "anneal")),
            d_final=float(_expect(anneal_cfg, "d_final", (int, float), "anneal")),
            n_steps=_expect(anneal_cfg, "n_steps", int, "anneal"),
            n_is=n_is,
        )
    initial = s.get("initial_pulses")
    if initial is None and s.get("initial_schedule_file"):
        initial = read_schedule(s["initial_schedule_file"]).pulses
    try:
        return ISConfig(
            n_traj=_expect(s, "n_traj", int, "sampling"),
            n_is=n_is,
            window=tuple((int(a), int(b)) for a, b in window),
            spline_knots=s.get("spline_knots"),
            spline_every=_expect(s, "spline_every", int, "sampling", default=1),
            anneal=anneal,
            stop_fidelity=s.get("stop_fidelity"),
            early_stop=bool(s.get("early_stop", False)),
            n_workers=threads,
            initial_pulses=None if initial is None else np.asarray(initial, dtype=float),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sampling block invalid: {exc}") from exc


class MetricsWriter:
    """Streams one CSV row per iteration, header and hash comment first."""

    def __init__(self, path: Path, cfg_hash: str):
        self.fh = open(path, "w", newline="")
        self.fh.write(f"# config_hash={cfg_hash}\n")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(METRICS_COLUMNS)

    def __call__(self, row: dict):
        self.writer.writerow([
            row["p"],
            *(f"{row[k]:.12g}" for k in ("F_avg", "F_min", "C", "ESS", "D_tilde", "lambda")),
            f"{row['seconds']:.6f}",
        ])
        self.fh.flush()

    def close(self):
        self.fh.close()


def write_schedule(path: Path, schedule: ControlSchedule, cfg_hash: str,
                   frame: str, kind: str):
    payload = {
        "config_hash": cfg_hash,
        "problem_kind": kind,
        "frame": frame,
        "grid": {
            "horizon": schedule.grid.horizon,
            "n_steps": schedule.grid.n_steps,
            "n_bins": schedule.grid.n_bins,
        },
        "pulses": schedule.pulses.tolist(),
    }
    path.write_text(json.dumps(payload, indent=1))


def read_schedule(path) -> ControlSchedule:
    raw = json.loads(Path(path).read_text())
    grid = TimeGrid(raw["grid"]["horizon"], raw["grid"]["n_steps"], raw["grid"]["n_bins"])
    return ControlSchedule(np.asarray(raw["pulses"], dtype=float), grid)


def write_manifest(path: Path, cfg: dict, cfg_hash: str, command: str, extra: dict):
    payload = {
        "command": command,
        "config": cfg,
        "config_hash": cfg_hash,
        "package_version": __version__,
        "design_flags": DESIGN_FLAGS,
        **extra,
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def _prepare(args, anneal_required=False):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    seed = _expect(cfg, "seed", int, "config")
    out_dir = Path(_expect(cfg, "out_dir", str, "config"))
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = build_grid(cfg)
    bundle = build_problem(cfg, grid)
    return cfg, seed, out_dir, grid, bundle


def cmd_optimize(args, anneal_required=False) -> int:
    cfg, seed, out_dir, grid, bundle = _prepare(args)
    if anneal_required and not cfg.get("anneal"):
        raise ConfigError("the anneal command needs an anneal block in the config")
    is_cfg = build_is_config(cfg, args.threads)
    cfg_hash = config_hash(cfg)
    metrics = MetricsWriter(out_dir / "metrics.csv", cfg_hash)
    try:
        run = optimize(bundle, grid, is_cfg, seed, metrics_cb=metrics)
    finally:
        metrics.close()
    write_schedule(out_dir / "schedule.json", run.final_schedule, cfg_hash,
                   bundle.frame, cfg["problem"]["kind"])
    extra = {
        "seed": seed,
        "n_iterations": run.n_iterations,
        "stop_reason": run.stop_reason,
        "clamp_events": run.clamp_events,
        "outputs": ["metrics.csv", "schedule.json"],
    }
    if cfg.get("anneal"):
        extra["f_closed"] = unitary_transfer_eval(run.final_schedule, bundle)
        extra["final_d_tilde"] = float(run.d_tilde[-1])
    write_manifest(out_dir / "manifest.json", cfg, cfg_hash,
                   "anneal" if anneal_required else "optimize", extra)
    return 0


def cmd_anneal(args) -> int:
    return cmd_optimize(args, anneal_required=True)


def cmd_grape(args) -> int:
    cfg, seed, out_dir, grid, bundle = _prepare(args)
    g = cfg.get("grape", {})
    eps0 = float(g.get("eps0", 0.1))
    max_iter = int(g.get("max_iter", 1000))
    family = tuple(g.get("seed_family", BENCHMARK_SEED_FAMILIES[0]))
    pulses0 = seed_schedules(family, 1, bundle.n_channels, grid.n_bins, seed)[0]
    state = grape_optimize(bundle.lindblad, bundle.cost, pulses0, grid,
                           bundle.psi0, eps0, max_iter)
    cfg_hash = config_hash(cfg)
    schedule = ControlSchedule(state.pulses, grid)
    write_schedule(out_dir / "schedule.json", schedule, cfg_hash,
                   bundle.frame, cfg["problem"]["kind"])
    metrics = deterministic_metrics(bundle, state.pulses, grid)
    write_manifest(out_dir / "manifest.json", cfg, cfg_hash, "grape", {
        "seed": seed,
        "eps0": eps0,
        "final_eps": state.eps,
        "n_iterations": state.n_iterations,
        "terminated_by_backoff": state.terminated,
        "final_cost": state.cost_trace[-1],
        **metrics,
        "outputs": ["schedule.json"],
    })
    return 0


def deterministic_metrics(bundle, pulses: np.ndarray, grid: TimeGrid) -> dict:
    """Master-equation cost, fidelity and fluence of one pulse matrix."""
    from .qcore import integrate_lindblad

    rhos = integrate_lindblad(bundle.lindblad, pulses, grid, bundle.psi0.density())
    fid = float(np.real(np.trace(rhos[-1] @ bundle.cost.target.density())))
    sched = ControlSchedule(pulses, grid)
    flu = fluence(sched)
    ru = bundle.cost.r_matrix @ pulses
    quad = 0.5 * float(np.sum(pulses * ru)) * grid.bin_width
    return {"cost": -(bundle.cost.q / 2.0) * fid + quad, "fidelity": fid, "fluence": flu}


def run_benchmark(bundle, grid: TimeGrid, is_cfg: ISConfig, eps0: float,
                  max_iter: int, n_runs: int, seed: int):
    """Paired sampling-vs-gradient comparison; returns one row dict per run."""
    rows = []
    for i in range(n_runs):
        run = optimize(bundle, grid, is_cfg, seed + i)
        m = deterministic_metrics(bundle, run.final_schedule.pulses, grid)
        rows.append({"method": "qdc", "family": "zero", "run": i, **m,
                     "iterations": run.n_iterations})
    for i in range(n_runs):
        family = BENCHMARK_SEED_FAMILIES[i % len(BENCHMARK_SEED_FAMILIES)]
        pulses0 = seed_schedules(family, 1, bundle.n_channels, grid.n_bins,
                                 seed + 10_000 + i)[0]
        state = grape_optimize(bundle.lindblad, bundle.cost, pulses0, grid,
                               bundle.psi0, eps0, max_iter)
        m = deterministic_metrics(bundle, state.pulses, grid)
        fam = family[0] + "," + ",".join(str(v) for v in family[1:])
        rows.append({"method": "grape", "family": fam, "run": i, **m,
                     "iterations": state.n_iterations})
    return rows


def cmd_benchmark(args) -> int:
    cfg, seed, out_dir, grid, bundle = _prepare(args)
    is_cfg = build_is_config(cfg, args.threads)
    g = cfg.get("grape", {})
    n_runs = int(cfg.get("benchmark", {}).get("n_runs", 50))
    rows = run_benchmark(bundle, grid, is_cfg, float(g.get("eps0", 0.1)),
                         int(g.get("max_iter", 1000)), n_runs, seed)
    cfg_hash = config_hash(cfg)
    path = out_dir / "benchmark.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(("kind", "method", "family", "run", "cost", "fidelity",
                         "fluence", "iterations"))
        for r in rows:
            writer.writerow(("run", r["method"], r["family"], r["run"],
                             f"{r['cost']:.12g}", f"{r['fidelity']:.12g}",
                             f"{r['fluence']:.12g}", r["iterations"]))
        for method in ("qdc", "grape"):
            costs = np.array([r["cost"] for r in rows if r["method"] == method])
            writer.writerow(("summary", method, "", "",
                             f"{costs.mean():.12g}", f"{costs.std():.12g}",
                             f"{costs.min():.12g}", len(costs)))
    write_manifest(out_dir / "manifest.json", cfg, cfg_hash, "benchmark",
                   {"seed": seed, "n_runs": n_runs, "outputs": ["benchmark.csv"]})
    return 0


def cmd_robustness(args) -> int:
    cfg, seed, out_dir, grid, bundle = _prepare(args)
    r = _expect(cfg, "robustness", dict, "config")
    sigma_grid = [float(s) for s in _expect(r, "sigma_grid", list, "robustness")]
    n_real = _expect(r, "n_realizations", int, "robustness", default=20)
    sched_file = _expect(r, "schedule_file", str, "robustness")
    schedule = read_schedule(sched_file)
    if schedule.grid != grid:
        raise ConfigError("schedule grid does not match the config grid")
    cost_fn = deterministic_cost_fn(bundle, grid)
    cfg_hash = config_hash(cfg)
    path = out_dir / "robustness.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(("sigma", "max_dC"))
        for j, sigma in enumerate(sigma_grid):
            worst = robustness_probe(schedule, sigma, n_real, cost_fn, seed + j)
            writer.writerow((f"{sigma:.12g}", f"{worst:.12g}"))
    write_manifest(out_dir / "manifest.json", cfg, cfg_hash, "robustness",
                   {"seed": seed, "n_realizations": n_real,
                    "outputs": ["robustness.csv"]})
    return 0


def run_transfer(bundle, grid: TimeGrid, is_cfg: ISConfig, q_stages, threshold: float,
                 seed: int, metrics_cb=None):
    """Refit with increasing fidelity weight until the threshold is met.

    Returns (final schedule, per-stage summaries, f_closed).  The pulse
    matrix of each stage seeds the next one.
    """
    from dataclasses import replace

    pulses = None
    stages = []
    run = None
    for idx, q in enumerate(q_stages):
        staged = bundle.with_cost(replace(bundle.cost, q=float(q)))
        stage_cfg = replace(is_cfg, stop_fidelity=threshold, initial_pulses=pulses)
        run = optimize(staged, grid, stage_cfg, seed + idx, metrics_cb=metrics_cb)
        pulses = run.final_schedule.pulses
        stages.append({"q": float(q), "f_avg": float(run.f_avg[-1]),
                       "iterations": run.n_iterations,
                       "stop_reason": run.stop_reason})
        if run.stop_reason == "fidelity threshold":
            break
    f_closed = unitary_transfer_eval(run.final_schedule, bundle)
    return run.final_schedule, stages, f_closed


def cmd_transfer(args) -> int:
    cfg, seed, out_dir, grid, bundle = _prepare(args)
    is_cfg = build_is_config(cfg, args.threads)
    t = cfg.get("transfer", {})
    q_stages = t.get("q_stages", [5, 50, 100])
    threshold = float(t.get("fidelity_threshold", 0.98))
    cfg_hash = config_hash(cfg)
    metrics = MetricsWriter(out_dir / "metrics.csv", cfg_hash)
    try:
        schedule, stages, f_closed = run_transfer(
            bundle, grid, is_cfg, q_stages, threshold, seed, metrics_cb=metrics)
    finally:
        metrics.close()
    write_schedule(out_dir / "schedule.json", schedule, cfg_hash,
                   bundle.frame, cfg["problem"]["kind"])
    write_manifest(out_dir / "manifest.json", cfg, cfg_hash, "transfer", {
        "seed": seed, "stages": stages, "f_closed": f_closed,
        "outputs": ["metrics.csv", "schedule.json"],
    })
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qdc",
        description="Sampling-based optimal control of open quantum systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "optimize": cmd_optimize,
        "anneal": cmd_anneal,
        "grape": cmd_grape,
        "benchmark": cmd_benchmark,
        "robustness": cmd_robustness,
        "transfer": cmd_transfer,
    }
    for name, fn in handlers.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the config output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for trajectory batches")
        p.set_defaults(handler=fn)
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
