"""
PBRL outer loop: oracle solve, inexact gradient of F_lambda, joint projected
step on (x, y) with one shared step size.

The loop itself (`projected_descent`) is problem-agnostic. Problems hand it
an evaluation callback that returns objective values and gradients for the
current iterate; the single-agent penalty problem, the zero-sum NI problem
and the independent policy-gradient baseline all run through it.

Environment-step accounting is a convention, recorded in every trace header:

    env_steps per iteration = (inner_iterations + mc_estimates) * traj_len * batch
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DivergenceError, PBRLError
from .mdp_core import ParamMDP, expected_value, policy_gradient_exact
from .oracle import OracleConfig, solve_lower_level, tight_solve
from .penalty import (
    PenaltyKind,
    PenaltySpec,
    Structure,
    UpperObjective,
    penalized_objective,
)
from .policy import (
    LOG_CLAMP,
    ParamKind,
    project_simplex_rows,
    softmax_chain_gradient,
    softmax_materialize,
)
from .sampling import MCConfig, mc_policy_gradient, mc_q_table

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
DESCENT_TOL = 1e-9
ENV_STEPS_FORMULA = "(inner_iterations + mc_estimates) * traj_len * batch"
BASE_COLUMNS = (
    "k",
    "f",
    "p",
    "F",
    "grad_norm_sq",
    "follower_gap",
    "oracle_gap",
    "env_steps",
    "wall_time",
    "exact_grad_norm_sq",
)


@dataclass(frozen=True)
class PBRLConfig:
    lam: float = 2.0
    alpha: float = 0.1
    K: int = 100
    penalty_kind: PenaltyKind = PenaltyKind.VALUE
    oracle: OracleConfig = OracleConfig(method="auto", eta=0.1, T=1)
    y_param: ParamKind = ParamKind.DIRECT
    gradient_mode: str = "exact"  # exact | mc
    mc: MCConfig = MCConfig()
    track_exact: bool = False
    eps_orac: Optional[float] = None
    # coefficient on lambda^2 ||grad error||^2 in the running-average oracle-accuracy condition
    oracle_error_weight: float = 20.0
    seed: int = 0

    def __post_init__(self) -> None:
        # alpha = 0 evaluates without moving; the gradient mapping is then undefined
        if not self.alpha >= 0.0:
            raise ConfigError(f"step size alpha must be nonnegative, got {self.alpha}")
        if not self.oracle_error_weight >= 0.0:
            raise ConfigError(f"oracle error weight must be nonnegative, got {self.oracle_error_weight}")
        if self.K < 0:
            raise ConfigError(f"outer iterations K must be nonnegative, got {self.K}")
        if self.lam < 0.0:
            raise ConfigError(f"penalty constant must be nonnegative, got {self.lam}")
        if self.gradient_mode not in ("exact", "mc"):
            raise ConfigError(f"unknown gradient mode {self.gradient_mode!r}")

    def mc_for(self, k: int, stream: int = 0) -> MCConfig:
        """Per-iteration MC seed derived from (seed, k, stream), independent of scheduling."""
        seed = int(np.random.SeedSequence([self.seed, k, stream]).generate_state(1)[0])
        return MCConfig(self.mc.traj_len, self.mc.batch, seed)


@dataclass
class TraceRecord:
    k: int
    f: float
    p: float
    F: float
    grad_norm_sq: float
    follower_gap: float
    oracle_gap: float
    env_steps: int
    wall_time: float
    exact_grad_norm_sq: float = float("nan")
    metrics: Dict[str, float] = field(default_factory=dict)

    def as_row(self) -> Dict[str, float]:
        row = {name: getattr(self, name) for name in BASE_COLUMNS}
        row.update(self.metrics)
        return row


@dataclass
class RunTrace:
    header: Dict[str, object]
    records: List[TraceRecord] = field(default_factory=list)
    summary: Dict[str, object] = field(default_factory=dict)

    @property
    def metric_names(self) -> List[str]:
        extra = sorted({key for rec in self.records for key in rec.metrics})
        return list(BASE_COLUMNS) + extra

    def column(self, name: str) -> np.ndarray:
        if name in BASE_COLUMNS:
            return np.array([getattr(rec, name) for rec in self.records], dtype=float)
        return np.array([rec.metrics.get(name, np.nan) for rec in self.records], dtype=float)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Evaluation:
    """Everything one outer iteration needs from the problem at (x, y)."""

    F: float
    f: float
    p: float
    grad_x: np.ndarray
    grad_y: List[np.ndarray]
    inner_iterations: int = 0
    mc_estimates: int = 0
    follower_gap: float = float("nan")
    oracle_gap: float = float("nan")
    metrics: Dict[str, float] = field(default_factory=dict)
    exact_grad_x: Optional[np.ndarray] = None
    exact_grad_y: Optional[List[np.ndarray]] = None
    # for ascent-type baselines the step direction is +grad
    ascent: bool = False


EvaluateFn = Callable[[np.ndarray, List[np.ndarray], int], Evaluation]


@dataclass
class BilevelProblem:
    mdp: ParamMDP
    upper: UpperObjective
    x0: np.ndarray
    y0: Optional[np.ndarray] = None
    x_box: Optional[Tuple[np.ndarray, np.ndarray]] = None
    structure: Optional[Structure] = None
    metrics: Optional[Callable[[np.ndarray, np.ndarray], Dict[str, float]]] = None
    name: str = "bilevel"

    def initial_policy(self) -> np.ndarray:
        if self.y0 is None:
            return np.full((self.mdp.n_states, self.mdp.n_actions), 1.0 / self.mdp.n_actions)
        return np.asarray(self.y0, dtype=float)


def project_x(x: np.ndarray, box: Optional[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    if box is None:
        return x
    return np.clip(x, box[0], box[1])


def to_parameters(probs: np.ndarray, kind: ParamKind) -> np.ndarray:
    if kind == ParamKind.SOFTMAX:
        return np.log(np.maximum(probs, LOG_CLAMP))
    return np.array(probs, dtype=float)


def materialize(y: np.ndarray, kind: ParamKind) -> np.ndarray:
    return softmax_materialize(y) if kind == ParamKind.SOFTMAX else y


def parameter_gradient(y: np.ndarray, grad_pi: np.ndarray, kind: ParamKind) -> np.ndarray:
    return softmax_chain_gradient(y, grad_pi) if kind == ParamKind.SOFTMAX else grad_pi


def step_y(y: np.ndarray, grad_pi: np.ndarray, alpha: float, kind: ParamKind) -> np.ndarray:
    if kind == ParamKind.SOFTMAX:
        return y - alpha * softmax_chain_gradient(y, grad_pi)
    return project_simplex_rows(y - alpha * grad_pi)


def gradient_mapping_sq(
    x: np.ndarray,
    ys: Sequence[np.ndarray],
    grad_x: np.ndarray,
    grad_ys: Sequence[np.ndarray],
    alpha: float,
    kind: ParamKind,
    box: Optional[Tuple[np.ndarray, np.ndarray]],
) -> float:
    """||(z - Proj_Z(z - alpha grad))/alpha||^2 over the joint iterate; NaN at alpha = 0."""
    if alpha == 0.0:
        return float("nan")
    total = float(np.sum(((x - project_x(x - alpha * grad_x, box)) / alpha) ** 2))
    for y, g in zip(ys, grad_ys):
        total += float(np.sum(((y - step_y(y, g, alpha, kind)) / alpha) ** 2))
    return total


def _nanmin(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    return float(finite.min()) if finite.size else float("nan")


def _evaluate(evaluate: EvaluateFn, x: np.ndarray, probs: List[np.ndarray], k: int, trace: RunTrace) -> Evaluation:
    try:
        return evaluate(x, probs, k)
    except PBRLError as e:
        trace.summary["failed_at"] = k
        if e.trace is None:
            e.trace = trace
        raise


def _divergence_check(ev: Evaluation, k: int, trace: RunTrace) -> None:
    if not np.isfinite(ev.F) or abs(ev.F) > DIVERGENCE_LIMIT:
        trace.summary["diverged"] = True
        trace.summary["diverged_at"] = k
        raise DivergenceError(f"|F_lambda| = {ev.F!r} left the sane region at iteration {k}", trace=trace)


def projected_descent(
    evaluate: EvaluateFn,
    x0: np.ndarray,
    ys0: Sequence[np.ndarray],
    cfg: PBRLConfig,
    header: Dict[str, object],
    box: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> RunTrace:
    """Run K joint projected steps; ys0 are materialized policies."""
    kind = cfg.y_param
    x = project_x(np.array(x0, dtype=float), box)
    ys = [to_parameters(np.asarray(y, dtype=float), kind) for y in ys0]
    trace = RunTrace(
        header={**header, "env_steps_formula": ENV_STEPS_FORMULA, "y_param": kind.value},
        summary={"diverged": False},
    )
    env_steps = 0
    oracle_err_sum = 0.0
    movement_sum = 0.0
    exact_sum = 0.0
    violations = 0
    prev_F = None

    for k in range(cfg.K):
        started = time.perf_counter()
        ev = _evaluate(evaluate, x, [materialize(y, kind) for y in ys], k, trace)
        _divergence_check(ev, k, trace)
        if prev_F is not None and ev.F > prev_F + DESCENT_TOL and not ev.ascent:
            violations += 1
        prev_F = ev.F

        sign = -1.0 if ev.ascent else 1.0
        new_x = project_x(x - sign * cfg.alpha * ev.grad_x, box)
        new_ys = [step_y(y, sign * g, cfg.alpha, kind) for y, g in zip(ys, ev.grad_y)]
        moved = float(np.sum((new_x - x) ** 2)) + sum(float(np.sum((a - b) ** 2)) for a, b in zip(new_ys, ys))
        grad_norm_sq = moved / cfg.alpha**2 if cfg.alpha > 0.0 else float("nan")

        exact_g = float("nan")
        if ev.exact_grad_x is not None and ev.exact_grad_y is not None:
            exact_g = gradient_mapping_sq(x, ys, ev.exact_grad_x, ev.exact_grad_y, cfg.alpha, kind, box)
            exact_sum += exact_g
            err = float(np.sum((ev.grad_x - ev.exact_grad_x) ** 2))
            err += sum(
                float(np.sum((parameter_gradient(y, a, kind) - parameter_gradient(y, b, kind)) ** 2))
                for y, a, b in zip(ys, ev.grad_y, ev.exact_grad_y)
            )
            oracle_err_sum += cfg.oracle_error_weight * err
            movement_sum += grad_norm_sq

        env_steps += (ev.inner_iterations + ev.mc_estimates) * cfg.mc.env_steps
        trace.records.append(
            TraceRecord(
                k=k,
                f=ev.f,
                p=ev.p,
                F=ev.F,
                grad_norm_sq=grad_norm_sq,
                follower_gap=ev.follower_gap,
                oracle_gap=ev.oracle_gap,
                env_steps=env_steps,
                wall_time=time.perf_counter() - started,
                exact_grad_norm_sq=exact_g,
                metrics=dict(ev.metrics),
            )
        )
        logger.debug("k=%d F=%.6g p=%.3e |G|^2=%.3e gap=%.3e", k, ev.F, ev.p, grad_norm_sq, ev.follower_gap)
        x, ys = new_x, new_ys

    final = _evaluate(evaluate, x, [materialize(y, kind) for y in ys], cfg.K, trace)
    _divergence_check(final, cfg.K, trace)
    K = max(cfg.K, 1)
    trace.summary.update(
        {
            "iterations": cfg.K,
            "avg_grad_norm_sq": float(np.mean(trace.column("grad_norm_sq"))) if trace.records else 0.0,
            "min_follower_gap": _nanmin(np.append(trace.column("follower_gap"), final.follower_gap)),
            "final_f": final.f,
            "final_p": final.p,
            "final_F": final.F,
            "final_follower_gap": final.follower_gap,
            "env_steps_total": env_steps,
            "descent_violations": violations,
        }
    )
    trace.summary.update({f"final_{key}": value for key, value in final.metrics.items()})
    if violations:
        logger.warning("%d of %d iterations increased F_lambda", violations, cfg.K)
    if trace.records and np.isfinite(trace.records[0].exact_grad_norm_sq):
        implied = max(oracle_err_sum / K - movement_sum / K, 0.0)
        trace.summary["avg_exact_grad_norm_sq"] = exact_sum / K
        trace.summary["oracle_error_avg"] = oracle_err_sum / K
        trace.summary["movement_avg"] = movement_sum / K
        trace.summary["eps_orac_implied"] = implied
        if cfg.eps_orac is not None:
            trace.summary["oracle_accuracy_held"] = bool(implied <= cfg.eps_orac)
    trace.summary["final_x"] = [float(v) for v in np.ravel(x)]
    trace.summary["final_y"] = [materialize(y, kind).tolist() for y in ys]
    return trace


def follower_gap(mdp: ParamMDP, x: np.ndarray, probs: np.ndarray, reference=None) -> float:
    """V*(rho) - V^pi(rho) against a tight reference solve."""
    ref = reference if reference is not None else tight_solve(mdp, x)
    return max(expected_value(mdp, x, ref.policy_hat) - expected_value(mdp, x, probs), 0.0)


def _single_agent_evaluator(problem: BilevelProblem, cfg: PBRLConfig) -> EvaluateFn:
    spec = PenaltySpec(cfg.penalty_kind, cfg.lam)
    mdp = problem.mdp
    warm: Dict[str, object] = {"policy": None}

    def evaluate(x: np.ndarray, probs_list: List[np.ndarray], k: int) -> Evaluation:
        probs = probs_list[0]
        cert = solve_lower_level(mdp, x, cfg.oracle, warm_start=warm["policy"])
        warm["policy"] = cert.policy_hat
        policy_grad = q_hat = None
        mc_estimates = 0
        # with lam = 0 there is no penalty gradient to sample
        if cfg.gradient_mode == "mc" and cfg.lam > 0.0:
            if cfg.penalty_kind == PenaltyKind.VALUE:
                policy_grad = mc_policy_gradient(mdp, x, probs, cfg.mc_for(k))
                mc_estimates = 1
            else:
                q_hat = mc_q_table(mdp, x, cert.policy_hat.probs, cfg.mc_for(k))
                mc_estimates = mdp.n_states * mdp.n_actions
        pe = penalized_objective(problem.upper, spec, mdp, x, probs, cert, problem.structure, policy_grad, q_hat)

        reference = tight_solve(mdp, x)
        exact_x = exact_y = None
        if cfg.track_exact:
            exact = penalized_objective(problem.upper, spec, mdp, x, probs, reference, problem.structure)
            exact_x, exact_y = exact.grad_x, [exact.grad_y]
        metrics = problem.metrics(x, probs) if problem.metrics is not None else {}
        return Evaluation(
            F=pe.F,
            f=pe.f,
            p=pe.p,
            grad_x=pe.grad_x,
            grad_y=[pe.grad_y],
            inner_iterations=cert.iterations_used,
            mc_estimates=mc_estimates,
            follower_gap=follower_gap(mdp, x, probs, reference),
            oracle_gap=float(np.sum((cert.policy_hat.probs - reference.policy_hat.probs) ** 2)),
            metrics=metrics,
            exact_grad_x=exact_x,
            exact_grad_y=exact_y,
        )

    return evaluate


def pbrl_run(problem: BilevelProblem, cfg: PBRLConfig) -> RunTrace:
    header = {
        "algorithm": f"pbrl_{cfg.penalty_kind.value}",
        "problem": problem.name,
        "lam": cfg.lam,
        "alpha": cfg.alpha,
        "K": cfg.K,
        "oracle": asdict(cfg.oracle),
        "gradient_mode": cfg.gradient_mode,
        "traj_len": cfg.mc.traj_len,
        "batch": cfg.mc.batch,
        "seed": cfg.seed,
    }
    logger.info("pbrl run %s: lambda=%g alpha=%g K=%d", problem.name, cfg.lam, cfg.alpha, cfg.K)
    return projected_descent(
        _single_agent_evaluator(problem, cfg),
        np.asarray(problem.x0, dtype=float),
        [problem.initial_policy()],
        cfg,
        header,
        problem.x_box,
    )


def projected_grad_norm(problem: BilevelProblem, cfg: PBRLConfig, x: np.ndarray, pi: np.ndarray) -> float:
    """Exact ||G_lambda||^2 at (x, pi), using a tight oracle for the penalty gradient."""
    if cfg.alpha <= 0.0:
        raise ConfigError("the projected gradient norm needs a positive step size alpha")
    x = np.asarray(x, dtype=float)
    probs = np.asarray(pi, dtype=float)
    spec = PenaltySpec(cfg.penalty_kind, cfg.lam)
    exact = penalized_objective(problem.upper, spec, problem.mdp, x, probs, tight_solve(problem.mdp, x), problem.structure)
    y = to_parameters(probs, cfg.y_param)
    return gradient_mapping_sq(x, [y], exact.grad_x, [exact.grad_y], cfg.alpha, cfg.y_param, problem.x_box)


class IndependentGame(Protocol):
    """What the independent policy-gradient baseline needs from a leader-follower game."""

    n_leader_params: int

    def follower_mdp(self) -> ParamMDP: ...

    def leader_value(self, x: np.ndarray, follower: np.ndarray) -> float: ...

    def leader_gradient(self, x: np.ndarray, follower: np.ndarray, mc: Optional[MCConfig] = None) -> np.ndarray: ...

    def metrics(self, x: np.ndarray, follower: np.ndarray) -> Dict[str, float]: ...


def independent_pg_run(game: IndependentGame, cfg: PBRLConfig, x0: Optional[np.ndarray] = None) -> RunTrace:
    """Both players ascend their own values simultaneously, one gradient step each."""
    mdp = game.follower_mdp()
    x_init = np.zeros(game.n_leader_params) if x0 is None else np.asarray(x0, dtype=float)
    y_init = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)

    def evaluate(x: np.ndarray, probs_list: List[np.ndarray], k: int) -> Evaluation:
        probs = probs_list[0]
        mc_estimates = 0
        if cfg.gradient_mode == "mc":
            gx = game.leader_gradient(x, probs, cfg.mc_for(k, 0))
            gy = mc_policy_gradient(mdp, x, probs, cfg.mc_for(k, 1))
            mc_estimates = 2
        else:
            gx = game.leader_gradient(x, probs)
            gy = policy_gradient_exact(mdp, x, probs)
        f = -game.leader_value(x, probs)
        gap = follower_gap(mdp, x, probs)
        return Evaluation(
            F=f,
            f=f,
            p=gap,
            grad_x=gx,
            grad_y=[gy],
            mc_estimates=mc_estimates,
            follower_gap=gap,
            metrics=game.metrics(x, probs),
            ascent=True,
        )

    header = {
        "algorithm": "independent_pg",
        "alpha": cfg.alpha,
        "K": cfg.K,
        "gradient_mode": cfg.gradient_mode,
        "traj_len": cfg.mc.traj_len,
        "batch": cfg.mc.batch,
        "seed": cfg.seed,
    }
    logger.info("independent PG run: alpha=%g K=%d", cfg.alpha, cfg.K)
    return projected_descent(evaluate, x_init, [y_init], cfg, header)
