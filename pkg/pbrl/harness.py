#!/usr/bin/env python3
"""
Experiment runner for the four bilevel applications

- Resolves an ExperimentConfig into (algorithm, seed) cells
- Runs the cells on a bounded thread pool (PBRL_THREADS)
- Writes one trace file per cell, a cross-seed summary.json and plot data
- Exit codes: 0 success, 2 config or validation error, 3 a run diverged or failed

Usage:
  python -m pbrl stackelberg --paper-defaults --seeds 0,1,2,3,4,5,6,7,8,9
  python -m pbrl incentive --algo pbrl_ni,fixed_incentive --outer-iters 300
  python -m pbrl plot runs/stackelberg --algo pbrl_value --metric follower_gap
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .algorithm import BASE_COLUMNS, PBRLConfig, RunTrace, TraceRecord, independent_pg_run, pbrl_run
from .applications import (
    collect_and_label_segments,
    fit_reward_from_preferences,
    fixed_incentive_baseline,
    incentive_problem,
    shaping_problem,
    stackelberg_problem,
)
from .envgen import EnvRecipe, generate
from .errors import ConfigError, DivergenceError, PBRLError, ValidationError
from .mdp_core import IncentiveMap
from .oracle import OracleConfig
from .penalty import PenaltyKind
from .policy import ParamKind
from .sampling import MCConfig
from .zerosum import pbrl_zs_run

logger = logging.getLogger(__name__)

DEFAULT_OUT = os.environ.get("PBRL_OUT", "runs")
PAPER_DEFAULTS_PATH = Path(__file__).with_name("paper_defaults.json")
TRACE_FORMAT = "pbrl-trace"
TRACE_VERSION = 1

EXPERIMENTS = {
    "stackelberg": ("pbrl_value", "pbrl_bellman", "independent_pg"),
    "incentive": ("pbrl_ni", "fixed_incentive"),
    "shaping": ("pbrl_value", "pbrl_bellman"),
    "preference": ("pbrl_value", "pbrl_bellman"),
}

PENALTY_FOR = {
    "pbrl_value": PenaltyKind.VALUE,
    "pbrl_bellman": PenaltyKind.BELLMAN,
    "pbrl_ni": PenaltyKind.NIKAIDO_ISODA,
    "independent_pg": PenaltyKind.VALUE,
    "fixed_incentive": PenaltyKind.NIKAIDO_ISODA,
}

PLOT_METRICS = {
    "stackelberg": ("follower_gap", "leader_value"),
    "incentive": ("ne_gap", "designer_reward"),
    "shaping": ("follower_gap", "original_return"),
    "preference": ("f", "reward_rank_tau", "true_return"),
}

BASE_HYPERPARAMETERS: Dict[str, Any] = {
    "lam": 2.0,
    "alpha": 0.1,
    "K": 100,
    "T": 1,
    "eta": 1.0,
    "traj_len": 5,
    "batch": 16,
    "tau": 0.05,
    "gamma": 0.9,
    "gradient_mode": "exact",
    "y_param": "softmax",
    "oracle_method": "auto",
    "track_exact": False,
    "n_pairs": 500,
    "segment_len": 5,
}

# summed Bradley-Terry loss over hundreds of pairs needs a much smaller step; lam scales up
# with it so the follower policy still moves
EXPERIMENT_HYPERPARAMETERS: Dict[str, Dict[str, Any]] = {
    "preference": {"lam": 10.0, "alpha": 1e-3, "K": 200},
    "shaping": {"K": 200},
}

RECIPES = {
    "stackelberg": EnvRecipe.stackelberg,
    "incentive": EnvRecipe.incentive,
    "shaping": EnvRecipe.sparse_chain,
    "preference": EnvRecipe.random_mdp,
}


def worker_count() -> int:
    return max(1, int(os.environ.get("PBRL_THREADS", os.cpu_count() or 1)))


@dataclass
class ExperimentConfig:
    """One batch of runs. Hyperparameters left as None resolve through the defaults chain."""

    experiment: str = "stackelberg"
    algorithms: List[str] = field(default_factory=lambda: ["pbrl_value"])
    seeds: List[int] = field(default_factory=lambda: [0])
    out: str = DEFAULT_OUT
    paper_defaults: bool = False
    env_size: Optional[int] = None
    n_actions: Optional[int] = None
    threshold: Optional[float] = None
    lam: Optional[float] = None
    alpha: Optional[float] = None
    K: Optional[int] = None
    T: Optional[int] = None
    eta: Optional[float] = None
    traj_len: Optional[int] = None
    batch: Optional[int] = None
    tau: Optional[float] = None
    gamma: Optional[float] = None
    gradient_mode: Optional[str] = None
    y_param: Optional[str] = None
    oracle_method: Optional[str] = None
    track_exact: Optional[bool] = None
    n_pairs: Optional[int] = None
    segment_len: Optional[int] = None


def load_experiment_config(path: Union[str, Path], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Overlay a JSON config file on base; keys missing from the file keep base's values."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return replace(base or ExperimentConfig(), **raw)


def load_paper_defaults() -> Dict[str, Dict[str, Dict[str, Any]]]:
    with PAPER_DEFAULTS_PATH.open("r", encoding="utf-8") as f:
        return json.load(f)


def resolve_hyperparameters(config: ExperimentConfig, algorithm: str) -> Dict[str, Any]:
    """Base defaults < per-experiment defaults < --paper-defaults overlay < explicit config values."""
    params = dict(BASE_HYPERPARAMETERS)
    params.update(EXPERIMENT_HYPERPARAMETERS.get(config.experiment, {}))
    if config.paper_defaults:
        params.update(load_paper_defaults().get(config.experiment, {}).get(algorithm, {}))
    for name in BASE_HYPERPARAMETERS:
        value = getattr(config, name)
        if value is not None:
            params[name] = value
    return params


def pbrl_config(params: Dict[str, Any], algorithm: str, seed: int) -> PBRLConfig:
    try:
        y_param = ParamKind(params["y_param"])
    except ValueError as e:
        raise ConfigError(f"unknown policy parameterization {params['y_param']!r}") from e
    return PBRLConfig(
        lam=float(params["lam"]),
        alpha=float(params["alpha"]),
        K=int(params["K"]),
        penalty_kind=PENALTY_FOR[algorithm],
        oracle=OracleConfig(method=params["oracle_method"], eta=float(params["eta"]), T=int(params["T"])),
        y_param=y_param,
        gradient_mode=params["gradient_mode"],
        mc=MCConfig(int(params["traj_len"]), int(params["batch"]), seed),
        track_exact=bool(params["track_exact"]),
        seed=seed,
    )


def env_recipe(config: ExperimentConfig, params: Dict[str, Any], seed: int) -> EnvRecipe:
    overrides: Dict[str, Any] = {"gamma": float(params["gamma"]), "tau": float(params["tau"])}
    if config.env_size is not None:
        overrides["n_states"] = config.env_size
    if config.n_actions is not None and config.experiment != "shaping":
        overrides["n_actions"] = overrides["n_actions2"] = config.n_actions
    if config.threshold is not None:
        overrides["threshold"] = config.threshold
    return RECIPES[config.experiment](seed=seed, **overrides)


def validate_config(config: ExperimentConfig) -> None:
    """Every incompatibility is reported here, before any run starts."""
    if config.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {config.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    if not config.algorithms:
        raise ConfigError("no algorithms selected")
    if not config.seeds:
        raise ConfigError("no seeds selected")
    if len(set(config.seeds)) != len(config.seeds):
        raise ConfigError(f"duplicate seeds in {config.seeds}")
    allowed = EXPERIMENTS[config.experiment]
    for algorithm in config.algorithms:
        if algorithm not in allowed:
            raise ConfigError(
                f"algorithm {algorithm!r} is not compatible with {config.experiment}; choose from {', '.join(allowed)}"
            )
        params = resolve_hyperparameters(config, algorithm)
        if algorithm == "pbrl_bellman" and float(params["tau"]) <= 0.0:
            raise ConfigError("pbrl_bellman needs tau > 0")
        pbrl_config(params, algorithm, config.seeds[0])
        env_recipe(config, params, config.seeds[0])


def _config_fields(config: ExperimentConfig) -> Dict[str, Any]:
    return {k: v for k, v in asdict(config).items() if k != "out"}


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the resolved config; the output directory does not enter it."""
    payload = {
        "config": _config_fields(config),
        "resolved": {a: resolve_hyperparameters(config, a) for a in config.algorithms},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class CellResult:
    algorithm: str
    seed: int
    trace: Optional[RunTrace]
    diverged: bool = False
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: List[CellResult]
    summary: Dict[str, Any]
    out_dir: Path


def _run_stackelberg(game, algorithm: str, cfg: PBRLConfig, params: Dict[str, Any]) -> RunTrace:
    if algorithm == "independent_pg":
        return independent_pg_run(game, cfg)
    return pbrl_run(stackelberg_problem(game), cfg)


def _run_incentive(env, algorithm: str, cfg: PBRLConfig, params: Dict[str, Any]) -> RunTrace:
    designer, game = env
    problem = incentive_problem(designer, game)
    if algorithm == "fixed_incentive":
        return fixed_incentive_baseline(problem, cfg)
    return pbrl_zs_run(problem, cfg)


def _run_shaping(mdp, algorithm: str, cfg: PBRLConfig, params: Dict[str, Any]) -> RunTrace:
    shaped = IncentiveMap(mdp.reward(np.zeros(mdp.dim_x)), scale=1.0)
    return pbrl_run(shaping_problem(mdp, shaped), cfg)


def _run_preference(mdp, algorithm: str, cfg: PBRLConfig, params: Dict[str, Any]) -> RunTrace:
    truth = mdp.reward(np.zeros(mdp.dim_x))
    uniform = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    data = collect_and_label_segments(mdp, truth, uniform, int(params["segment_len"]), int(params["n_pairs"]), cfg.seed)
    _, trace = fit_reward_from_preferences(mdp, data, cfg, truth=truth)
    trace.header["ties"] = data.ties
    return trace


RUNNERS = {
    "stackelberg": _run_stackelberg,
    "incentive": _run_incentive,
    "shaping": _run_shaping,
    "preference": _run_preference,
}


def run_cell(config: ExperimentConfig, algorithm: str, seed: int) -> CellResult:
    """One (algorithm, seed) run. A PBRLError ends this cell only; the batch keeps going."""
    try:
        params = resolve_hyperparameters(config, algorithm)
        cfg = pbrl_config(params, algorithm, seed)
        env = generate(env_recipe(config, params, seed))
        trace = RUNNERS[config.experiment](env, algorithm, cfg, params)
    except DivergenceError as e:
        logger.warning("%s seed %d diverged: %s", algorithm, seed, e)
        if e.trace is not None:
            e.trace.header.update({"algorithm": algorithm, "seed": seed})
        return CellResult(algorithm, seed, e.trace, diverged=True, error=str(e))
    except PBRLError as e:
        logger.error("%s seed %d failed: %s: %s", algorithm, seed, type(e).__name__, e)
        if e.trace is not None:
            e.trace.header.update({"algorithm": algorithm, "seed": seed})
        return CellResult(algorithm, seed, e.trace, error=f"{type(e).__name__}: {e}")
    trace.header.update({"algorithm": algorithm, "seed": seed})
    return CellResult(algorithm, seed, trace)


def _to_builtin(obj: Any) -> Any:
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def _fmt(value: Any) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def save_trace(trace: RunTrace, path: Union[str, Path]) -> Path:
    """JSON header line, then a tab-separated table of every record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = trace.metric_names
    head = {
        "format": TRACE_FORMAT,
        "version": TRACE_VERSION,
        "header": trace.header,
        "summary": trace.summary,
        "columns": columns,
    }
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(head, sort_keys=True, default=_to_builtin) + "\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(columns)
        for rec in trace.records:
            row = rec.as_row()
            writer.writerow([_fmt(row.get(c, float("nan"))) for c in columns])
    return path


def load_trace(path: Union[str, Path]) -> RunTrace:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        head = json.loads(fh.readline())
        if head.get("format") != TRACE_FORMAT or head.get("version") != TRACE_VERSION:
            raise ValidationError(f"{path} is not a version-{TRACE_VERSION} {TRACE_FORMAT} file")
        reader = csv.reader(fh, delimiter="\t")
        columns = next(reader)
        records = []
        for values in reader:
            row = dict(zip(columns, values))
            base = {c: float(row[c]) for c in BASE_COLUMNS}
            base["k"] = int(row["k"])
            base["env_steps"] = int(row["env_steps"])
            extra = {c: float(row[c]) for c in columns if c not in BASE_COLUMNS}
            records.append(TraceRecord(**base, metrics=extra))
    return RunTrace(header=head["header"], records=records, summary=head["summary"])


def _seed_labels(traces: Sequence[RunTrace]) -> List[str]:
    labels = [f"seed_{t.header.get('seed', i)}" for i, t in enumerate(traces)]
    if len(set(labels)) != len(labels):
        labels = [f"seed_{i}" for i in range(len(traces))]
    return labels


def emit_plot_data(traces: Sequence[RunTrace], metric: str, path: Union[str, Path]) -> Path:
    """Columns: env_steps, mean, std, then one column per trace. Rows stop at the shortest trace."""
    if not traces:
        raise ValidationError("no traces to plot")
    available = sorted(set.intersection(*(set(t.metric_names) for t in traces)))
    if metric not in available:
        raise ValidationError(f"unknown metric {metric!r}; available: {', '.join(available)}")
    n = min(len(t) for t in traces)
    data = np.vstack([t.column(metric)[:n] for t in traces])
    env_steps = traces[0].column("env_steps")[:n]
    mean = data.mean(axis=0)
    std = data.std(axis=0)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["env_steps", "mean", "std"] + _seed_labels(traces))
        for i in range(n):
            writer.writerow([str(int(env_steps[i])), repr(float(mean[i])), repr(float(std[i]))] + [repr(float(v)) for v in data[:, i]])
    logger.info("wrote %s plot data to %s", metric, path)
    return path


def load_plot_data(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        columns = next(reader)
        rows = [[float(v) for v in values] for values in reader]
    table = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    return {name: table[:, j] for j, name in enumerate(columns)}


def aggregate_curves(traces: Sequence[RunTrace]) -> Dict[str, Dict[str, List[float]]]:
    """Per-iteration mean and std of every shared metric; wall_time is left out."""
    traces = [t for t in traces if len(t)]
    if not traces:
        return {}
    n = min(len(t) for t in traces)
    shared = set.intersection(*(set(t.metric_names) for t in traces)) - {"wall_time"}
    curves = {}
    for metric in sorted(shared):
        data = np.vstack([t.column(metric)[:n] for t in traces])
        curves[metric] = {"mean": data.mean(axis=0).tolist(), "std": data.std(axis=0).tolist()}
    return curves


SUMMARY_SKIP = ("final_x", "final_y")


def summarize(config: ExperimentConfig, cells: Sequence[CellResult]) -> Dict[str, Any]:
    runs = []
    for cell in cells:
        entry: Dict[str, Any] = {
            "algorithm": cell.algorithm, "seed": cell.seed, "diverged": cell.diverged, "failed": cell.failed,
        }
        if cell.error:
            entry["error"] = cell.error
        if cell.trace is not None:
            entry.update({k: v for k, v in cell.trace.summary.items() if k not in SUMMARY_SKIP})
        runs.append(entry)

    aggregate: Dict[str, Any] = {}
    for algorithm in config.algorithms:
        done = [c.trace for c in cells if c.algorithm == algorithm and c.trace is not None and not c.failed]
        finals: Dict[str, Dict[str, float]] = {}
        keys = sorted({k for t in done for k, v in t.summary.items() if k.startswith("final_") and k not in SUMMARY_SKIP})
        for key in keys:
            values = np.array([float(t.summary.get(key, np.nan)) for t in done])
            finals[key] = {"mean": float(np.mean(values)), "std": float(np.std(values))}
        aggregate[algorithm] = {"runs": len(done), "final": finals, "curves": aggregate_curves(done)}

    return {
        "experiment": config.experiment,
        "config_hash": config_hash(config),
        "config": _config_fields(config),
        "resolved": {a: resolve_hyperparameters(config, a) for a in config.algorithms},
        "runs": runs,
        "aggregate": aggregate,
    }


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    validate_config(config)
    cells = [(a, s) for a in config.algorithms for s in config.seeds]
    threads = min(worker_count(), len(cells))
    logger.info("%s: %d runs on %d worker(s)", config.experiment, len(cells), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda cell: run_cell(config, *cell), cells))

    out_dir = Path(config.out) / config.experiment
    out_dir.mkdir(parents=True, exist_ok=True)
    for res in results:
        if res.trace is not None:
            save_trace(res.trace, out_dir / f"{res.algorithm}_seed{res.seed}.tsv")
    summary = summarize(config, results)
    with (out_dir / "summary.json").open("w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_to_builtin)

    for algorithm in config.algorithms:
        traces = [r.trace for r in results if r.algorithm == algorithm and r.trace is not None and len(r.trace)]
        for metric in PLOT_METRICS[config.experiment]:
            if traces and all(metric in t.metric_names for t in traces):
                emit_plot_data(traces, metric, out_dir / f"plot_{algorithm}_{metric}.tsv")
    logger.info("wrote %d traces and summary to %s", len(results), out_dir)
    return ExperimentResult(config, results, summary, out_dir)


def print_summary(cells: Sequence[CellResult]) -> None:
    print("\t".join(["algorithm", "seed", "iterations", "final_f", "final_p", "final_follower_gap", "env_steps", "status"]))
    for c in cells:
        s = c.trace.summary if c.trace is not None else {}
        status = "diverged" if c.diverged else "failed" if c.failed else "ok"
        print(
            f"{c.algorithm}\t{c.seed}\t{s.get('iterations', len(c.trace) if c.trace else 0)}\t"
            f"{float(s.get('final_f', np.nan)):.6g}\t{float(s.get('final_p', np.nan)):.6g}\t"
            f"{float(s.get('final_follower_gap', np.nan)):.6g}\t{s.get('env_steps_total', 0)}\t{status}"
        )


def _parse_ints(text: str, flag: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from e


FLAG_FIELDS = (
    "lam", "alpha", "K", "T", "eta", "traj_len", "batch", "tau", "gamma",
    "gradient_mode", "y_param", "oracle_method", "track_exact", "n_pairs", "segment_len",
)


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values: Dict[str, Any] = {
        "experiment": args.command,
        "out": args.out,
        "paper_defaults": args.paper_defaults,
        "algorithms": [a.strip() for a in args.algo.split(",") if a.strip()] if args.algo else list(EXPERIMENTS[args.command]),
    }
    if args.seeds:
        values["seeds"] = _parse_ints(args.seeds, "--seeds")
    for name in FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    if getattr(args, "full_size", False):
        values["env_size"] = 100
    elif args.env_size is not None:
        values["env_size"] = args.env_size
    config = ExperimentConfig(**values)
    if args.config:
        config = load_experiment_config(args.config, base=config)
    return config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Log every outer iteration")

    parser = argparse.ArgumentParser(prog="pbrl", description="Penalty-based bilevel RL experiments", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, algorithms in EXPERIMENTS.items():
        p = sub.add_parser(name, parents=[common], help=f"Run the {name} experiment")
        p.add_argument("--algo", type=str, default=None, help=f"Comma-separated algorithms ({', '.join(algorithms)}); default all")
        p.add_argument("--lambda", dest="lam", type=float, default=None, help="Penalty constant")
        p.add_argument("--alpha", type=float, default=None, help="Outer step size")
        p.add_argument("--outer-iters", dest="K", type=int, default=None, help="Outer iterations K")
        p.add_argument("--inner-iters", dest="T", type=int, default=None, help="Oracle iterations T per outer step")
        p.add_argument("--eta", type=float, default=None, help="Oracle step size")
        p.add_argument("--traj-len", dest="traj_len", type=int, default=None, help="Monte-Carlo trajectory length")
        p.add_argument("--batch", type=int, default=None, help="Monte-Carlo batch size")
        p.add_argument("--tau", type=float, default=None, help="Regularization weight")
        p.add_argument("--gamma", type=float, default=None, help="Discount factor")
        p.add_argument("--gradient-mode", dest="gradient_mode", choices=["exact", "mc"], default=None)
        p.add_argument("--y-param", dest="y_param", choices=[k.value for k in ParamKind], default=None)
        p.add_argument("--oracle", dest="oracle_method", choices=["auto", "pmd", "svi", "ppg", "brute"], default=None)
        p.add_argument("--track-exact", dest="track_exact", action="store_const", const=True, default=None,
                       help="Also compute exact gradients for the oracle-accuracy ledger")
        p.add_argument("--seeds", type=str, default=None, help="Comma-separated seeds, e.g. 0,1,2")
        p.add_argument("--env-size", dest="env_size", type=int, default=None, help="Number of states")
        if name == "stackelberg":
            p.add_argument("--full-size", dest="full_size", action="store_true", help="Use |S|=100")
        if name == "preference":
            p.add_argument("--n-pairs", dest="n_pairs", type=int, default=None, help="Labeled segment pairs")
            p.add_argument("--segment-len", dest="segment_len", type=int, default=None, help="Segment length")
        p.add_argument("--paper-defaults", dest="paper_defaults", action="store_true", help="Apply the published hyperparameters")
        p.add_argument("--out", type=str, default=DEFAULT_OUT, help="Output directory")
        p.add_argument("--config", type=str, default=None, help="JSON config file; its keys override flags")

    plot = sub.add_parser("plot", parents=[common], help="Emit plot data from saved traces")
    plot.add_argument("run_dir", type=str, help="Directory holding <algo>_seed<N>.tsv traces")
    plot.add_argument("--algo", type=str, required=True)
    plot.add_argument("--metric", type=str, required=True)
    plot.add_argument("--out", type=str, default=None, help="Output file (default: <run_dir>/plot_<algo>_<metric>.tsv)")
    return parser


def _plot_command(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    paths = sorted(run_dir.glob(f"{args.algo}_seed*.tsv"))
    if not paths:
        print(f"ERROR: no traces for {args.algo} in {run_dir}", file=sys.stderr)
        return 2
    try:
        traces = [load_trace(p) for p in paths]
        out = emit_plot_data(traces, args.metric, args.out or run_dir / f"plot_{args.algo}_{args.metric}.tsv")
    except ValidationError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 2
    print(out)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s: %(message)s")
    if args.command == "plot":
        return _plot_command(args)

    try:
        config = config_from_args(args)
        result = run_experiment(config)
    except (ConfigError, ValidationError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 2
    except PBRLError as e:
        print(f"ERROR: run failed: {e}", file=sys.stderr)
        return 3

    print_summary(result.cells)
    diverged = sum(c.diverged for c in result.cells)
    failed = sum(c.failed for c in result.cells) - diverged
    if diverged or failed:
        print(
            f"ERROR: {diverged} of {len(result.cells)} runs diverged, {failed} failed",
            file=sys.stderr,
        )
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
