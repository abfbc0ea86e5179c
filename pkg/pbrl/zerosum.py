"""
Parameterized two-player zero-sum Markov games and the Nikaido-Isoda penalty.

Player 1 maximizes and player 2 minimizes
    V = E[sum_t gamma^t (r_x(s,a1,a2) - tau h(pi1(s)) + tau h(pi2(s)))].

Every quantity is computed on a single-agent view: marginalizing the
opponent into the environment gives an ordinary ParamMDP, so best responses,
values and gradients reuse the single-agent machinery. Player 2's view
maximizes -V.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import linprog

from .algorithm import (
    Evaluation,
    PBRLConfig,
    RunTrace,
    projected_descent,
)
from .errors import OracleFailureError, UnsupportedStructureError, ValidationError
from .mdp_core import (
    ConstantMap,
    ParamMap,
    ParamMDP,
    evaluate_value_exact,
    expected_value,
    policy_gradient_exact,
    value_gradient_x_exact,
)
from .oracle import OracleCertificate, OracleConfig, solve_lower_level, tight_solve, value_gap_bound
from .policy import Regularizer, check_stochastic, validate_regularization
from .sampling import mc_policy_gradient

logger = logging.getLogger(__name__)

NEGATIVE_SLACK = 1e-8


@dataclass
class MarginalRewardMap(ParamMap):
    """sign * E_{opponent}[r_x(s, a1, a2)] + offset(s), as a per-player reward table."""

    base: ParamMap
    opponent: np.ndarray
    opponent_axis: int
    sign: float = 1.0
    offset: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n_s = self.base.out_shape[0]
        own = self.base.out_shape[2] if self.opponent_axis == 1 else self.base.out_shape[1]
        self.out_shape = (n_s, own)
        self.dim_x = self.base.dim_x
        self.depends_on_x = self.base.depends_on_x
        self._offset = np.zeros(n_s) if self.offset is None else np.asarray(self.offset, dtype=float)
        self._spec = "sb,sbc->sc" if self.opponent_axis == 1 else "sc,sbc->sb"

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        marg = np.einsum(self._spec, self.opponent, self.base.evaluate(x))
        return self.sign * marg + self._offset[:, None]

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        jac = self.base.jacobian(x)
        if self.opponent_axis == 1:
            return self.sign * np.einsum("sb,sbcd->scd", self.opponent, jac)
        return self.sign * np.einsum("sc,sbcd->sbd", self.opponent, jac)


@dataclass
class ZeroSumGame:
    n_states: int
    n_actions1: int
    n_actions2: int
    gamma: float
    tau: float
    regularizer: Regularizer
    reward_map: ParamMap
    transition: np.ndarray
    initial_dist: np.ndarray

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma}")
        validate_regularization(self.regularizer, self.tau)
        if isinstance(self.transition, ParamMap):
            raise UnsupportedStructureError("zero-sum games take x-independent transitions")
        shape = (self.n_states, self.n_actions1, self.n_actions2)
        if self.reward_map.out_shape != shape:
            raise ValidationError(f"reward map produces {self.reward_map.out_shape}, expected {shape}")
        self.transition = check_stochastic(self.transition, "joint transition")
        if self.transition.shape != shape + (self.n_states,):
            raise ValidationError("joint transition must be |S|x|A1|x|A2|x|S|")
        rho = check_stochastic(np.asarray(self.initial_dist, dtype=float)[None, :], "initial distribution")[0]
        if rho.min() <= 0.0:
            raise ValidationError("initial distribution must be strictly positive")
        self.initial_dist = rho

    @property
    def dim_x(self) -> int:
        return self.reward_map.dim_x

    def _reg(self, probs: np.ndarray) -> np.ndarray:
        return self.regularizer.values(probs) if self.tau > 0 else np.zeros(self.n_states)

    def player1_view(self, pi2: np.ndarray) -> ParamMDP:
        """Player 1's MDP with player 2 fixed; its value is V(pi1, pi2)."""
        pi2 = check_stochastic(pi2, "player 2 policy")
        reward = MarginalRewardMap(self.reward_map, pi2, opponent_axis=2, sign=1.0, offset=self.tau * self._reg(pi2))
        P = np.einsum("sc,sbct->sbt", pi2, self.transition)
        return ParamMDP(
            self.n_states, self.n_actions1, self.gamma, self.tau, self.regularizer,
            reward, ConstantMap(P, self.dim_x), self.initial_dist,
        )

    def player2_view(self, pi1: np.ndarray) -> ParamMDP:
        """Player 2's MDP with player 1 fixed; its value is -V(pi1, pi2)."""
        pi1 = check_stochastic(pi1, "player 1 policy")
        reward = MarginalRewardMap(self.reward_map, pi1, opponent_axis=1, sign=-1.0, offset=self.tau * self._reg(pi1))
        P = np.einsum("sb,sbct->sct", pi1, self.transition)
        return ParamMDP(
            self.n_states, self.n_actions2, self.gamma, self.tau, self.regularizer,
            reward, ConstantMap(P, self.dim_x), self.initial_dist,
        )


@dataclass(frozen=True)
class JointPolicy:
    pi1: np.ndarray
    pi2: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "pi1", check_stochastic(self.pi1, "player 1 policy"))
        object.__setattr__(self, "pi2", check_stochastic(self.pi2, "player 2 policy"))

    @classmethod
    def uniform(cls, game: ZeroSumGame) -> "JointPolicy":
        return cls(
            np.full((game.n_states, game.n_actions1), 1.0 / game.n_actions1),
            np.full((game.n_states, game.n_actions2), 1.0 / game.n_actions2),
        )


def zs_value_eval(game: ZeroSumGame, x: np.ndarray, joint: JointPolicy) -> np.ndarray:
    return evaluate_value_exact(game.player1_view(joint.pi2), x, joint.pi1)


def zs_value(game: ZeroSumGame, x: np.ndarray, pi1: np.ndarray, pi2: np.ndarray) -> float:
    return expected_value(game.player1_view(pi2), x, pi1)


@dataclass(frozen=True)
class BestResponses:
    cert1: OracleCertificate
    cert2: OracleCertificate


def best_responses(
    game: ZeroSumGame,
    x: np.ndarray,
    joint: JointPolicy,
    cfg: OracleConfig,
    warm: Optional[BestResponses] = None,
) -> BestResponses:
    cert1 = solve_lower_level(game.player1_view(joint.pi2), x, cfg, warm.cert1.policy_hat if warm else None)
    cert2 = solve_lower_level(game.player2_view(joint.pi1), x, cfg, warm.cert2.policy_hat if warm else None)
    return BestResponses(cert1, cert2)


def tight_best_responses(game: ZeroSumGame, x: np.ndarray, joint: JointPolicy) -> BestResponses:
    return BestResponses(tight_solve(game.player1_view(joint.pi2), x), tight_solve(game.player2_view(joint.pi1), x))


def ni_eval(game: ZeroSumGame, x: np.ndarray, joint: JointPolicy, br: BestResponses) -> float:
    """psi = V(pi1_hat, pi2) - V(pi1, pi2_hat)."""
    view1 = game.player1_view(joint.pi2)
    view2 = game.player2_view(joint.pi1)
    up = expected_value(view1, x, br.cert1.policy_hat)
    down = -expected_value(view2, x, br.cert2.policy_hat)
    psi = up - down
    if psi < 0.0:
        allowed = value_gap_bound(br.cert1, view1, x) + value_gap_bound(br.cert2, view2, x) + NEGATIVE_SLACK
        if psi < -allowed:
            raise OracleFailureError(f"NI value {psi:.3e} is below the certified gaps -{allowed:.3e}")
        return 0.0
    return float(psi)


def ni_grad(
    game: ZeroSumGame,
    x: np.ndarray,
    joint: JointPolicy,
    br: BestResponses,
    mc=None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Estimator of grad psi with the best responses taken from br.

    mc, when given, is a pair of MCConfig used for the two policy-gradient terms.
    """
    pi1_hat = br.cert1.policy_hat.probs
    pi2_hat = br.cert2.policy_hat.probs
    view1_pi2 = game.player1_view(joint.pi2)
    view2_pi1 = game.player2_view(joint.pi1)
    # V(pi1_hat, pi2) lives on view1(pi2); V(pi1, pi2_hat) = -(value on view2(pi1))
    grad_x = value_gradient_x_exact(view1_pi2, x, pi1_hat) + value_gradient_x_exact(view2_pi1, x, pi2_hat)

    view1_hat = game.player1_view(pi2_hat)
    view2_hat = game.player2_view(pi1_hat)
    if mc is None:
        g1 = policy_gradient_exact(view1_hat, x, joint.pi1)
        g2 = policy_gradient_exact(view2_hat, x, joint.pi2)
    else:
        g1 = mc_policy_gradient(view1_hat, x, joint.pi1, mc[0])
        g2 = mc_policy_gradient(view2_hat, x, joint.pi2, mc[1])
    # -grad_pi1 V(pi1, pi2_hat) and grad_pi2 V(pi1_hat, pi2) = -grad of the view-2 value
    return grad_x, -g1, -g2


def ni_dominance_lhs(grad_pi1: np.ndarray, grad_pi2: np.ndarray, joint: JointPolicy) -> float:
    """max over the simplex product of <grad psi, pi - pi'>, per-state argmin."""
    total = 0.0
    for g, p in ((grad_pi1, joint.pi1), (grad_pi2, joint.pi2)):
        total += float(np.sum(np.sum(p * g, axis=1) - g.min(axis=1)))
    return total


def swap_players(game: ZeroSumGame) -> ZeroSumGame:
    return ZeroSumGame(
        game.n_states, game.n_actions2, game.n_actions1, game.gamma, game.tau, game.regularizer,
        SwappedRewardMap(game.reward_map), np.transpose(game.transition, (0, 2, 1, 3)), game.initial_dist,
    )


@dataclass
class SwappedRewardMap(ParamMap):
    base: ParamMap

    def __post_init__(self) -> None:
        s, a1, a2 = self.base.out_shape
        self.out_shape = (s, a2, a1)
        self.dim_x = self.base.dim_x
        self.depends_on_x = self.base.depends_on_x

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return -np.transpose(self.base.evaluate(x), (0, 2, 1))

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return -np.transpose(self.base.jacobian(x), (0, 2, 1, 3))


@dataclass(frozen=True)
class MatrixGameSolution:
    row: np.ndarray
    col: np.ndarray
    value: float
    duality_gap: float


def _maximin(A: np.ndarray) -> Tuple[np.ndarray, float]:
    """max_p min_j (p^T A)_j via linprog on variables (p, v)."""
    m, n = A.shape
    c = np.zeros(m + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-A.T, np.ones((n, 1))])
    A_eq = np.hstack([np.ones((1, m)), np.zeros((1, 1))])
    bounds = [(0.0, None)] * m + [(None, None)]
    res = linprog(
        c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=[1.0], bounds=bounds, method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if not res.success:
        raise OracleFailureError(f"matrix game LP failed: {res.message}")
    p = np.maximum(res.x[:m], 0.0)
    return p / p.sum(), float(res.x[-1])


def matrix_game_lp_oracle(payoff: np.ndarray) -> MatrixGameSolution:
    A = np.asarray(payoff, dtype=float)
    if A.ndim != 2 or not np.all(np.isfinite(A)):
        raise ValidationError("payoff must be a finite matrix")
    row, _ = _maximin(A)
    col, _ = _maximin(-A.T)
    lower = float(np.min(row @ A))
    upper = float(np.max(A @ col))
    return MatrixGameSolution(row, col, 0.5 * (lower + upper), upper - lower)


class JointObjective:
    """Designer-side f(x, pi1, pi2) with gradients (grad_x, grad_pi1, grad_pi2)."""

    def evaluate(self, x: np.ndarray, joint: JointPolicy) -> float:
        raise NotImplementedError

    def grad(self, x: np.ndarray, joint: JointPolicy) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        raise NotImplementedError


@dataclass
class ZeroJointObjective(JointObjective):
    dim_x: int

    def evaluate(self, x: np.ndarray, joint: JointPolicy) -> float:
        return 0.0

    def grad(self, x: np.ndarray, joint: JointPolicy):
        return np.zeros(self.dim_x), np.zeros_like(joint.pi1), np.zeros_like(joint.pi2)


@dataclass
class ZeroSumBilevelProblem:
    game: ZeroSumGame
    upper: JointObjective
    x0: np.ndarray
    joint0: Optional[JointPolicy] = None
    x_box: Optional[Tuple[np.ndarray, np.ndarray]] = None
    # reported as designer_reward; defaults to the upper objective
    designer: Optional[JointObjective] = None
    name: str = "zero_sum"

    def initial_joint(self) -> JointPolicy:
        return self.joint0 if self.joint0 is not None else JointPolicy.uniform(self.game)


def pbrl_zs_run(problem: ZeroSumBilevelProblem, cfg: PBRLConfig) -> RunTrace:
    """Projected descent on f + lambda * psi over (x, pi1, pi2)."""
    game = problem.game
    warm: Dict[str, Optional[BestResponses]] = {"br": None}

    def evaluate(x: np.ndarray, probs: List[np.ndarray], k: int) -> Evaluation:
        joint = JointPolicy(probs[0], probs[1])
        br = best_responses(game, x, joint, cfg.oracle, warm["br"])
        warm["br"] = br
        mc = (cfg.mc_for(k, 0), cfg.mc_for(k, 1)) if cfg.gradient_mode == "mc" else None
        psi = ni_eval(game, x, joint, br)
        gx, g1, g2 = ni_grad(game, x, joint, br, mc)
        f = problem.upper.evaluate(x, joint)
        fx, f1, f2 = problem.upper.grad(x, joint)
        designer_reward = -(problem.designer.evaluate(x, joint) if problem.designer is not None else f)

        tight = tight_best_responses(game, x, joint)
        psi_exact = ni_eval(game, x, joint, tight)
        exact_x = exact_y = None
        if cfg.track_exact:
            ex, e1, e2 = ni_grad(game, x, joint, tight)
            exact_x, exact_y = fx + cfg.lam * ex, [f1 + cfg.lam * e1, f2 + cfg.lam * e2]
        oracle_gap = float(
            np.sum((br.cert1.policy_hat.probs - tight.cert1.policy_hat.probs) ** 2)
            + np.sum((br.cert2.policy_hat.probs - tight.cert2.policy_hat.probs) ** 2)
        )
        return Evaluation(
            F=f + cfg.lam * psi,
            f=f,
            p=psi,
            grad_x=fx + cfg.lam * gx,
            grad_y=[f1 + cfg.lam * g1, f2 + cfg.lam * g2],
            inner_iterations=br.cert1.iterations_used + br.cert2.iterations_used,
            mc_estimates=2 if mc else 0,
            follower_gap=psi_exact,
            oracle_gap=oracle_gap,
            metrics={"ne_gap": psi, "designer_reward": designer_reward},
            exact_grad_x=exact_x,
            exact_grad_y=exact_y,
        )

    joint0 = problem.initial_joint()
    header = {
        "algorithm": "pbrl_ni",
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
    logger.info("pbrl NI run %s: lambda=%g alpha=%g K=%d", problem.name, cfg.lam, cfg.alpha, cfg.K)
    return projected_descent(evaluate, problem.x0, [joint0.pi1, joint0.pi2], cfg, header, problem.x_box)
