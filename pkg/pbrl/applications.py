"""
Reductions of the four applications to the generic bilevel interfaces.

- Stackelberg Markov games: the leader's softmax logits are x, the follower
  solves the MDP obtained by averaging over the leader's action
- tabular preference-based RL: Bradley-Terry loss over labeled segment pairs
  as the upper objective, reward table as x
- reward shaping: original return as f, shaped reward as the lower level
- incentive design: designer return on its own chain over a zero-sum lower level
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit
from scipy.stats import kendalltau

from .algorithm import BilevelProblem, PBRLConfig, RunTrace, pbrl_run
from .errors import ValidationError
from .mdp_core import (
    ConstantMap,
    LeaderMixtureMap,
    ParamMap,
    ParamMDP,
    TableMap,
    expected_value,
    policy_gradient_exact,
)
from .penalty import UpperObjective
from .policy import Regularizer, check_stochastic, softmax_chain_gradient, softmax_materialize
from .sampling import MCConfig, make_rng, mc_policy_gradient, rollout
from .zerosum import (
    JointObjective,
    JointPolicy,
    ZeroJointObjective,
    ZeroSumBilevelProblem,
    ZeroSumGame,
    pbrl_zs_run,
)

logger = logging.getLogger(__name__)

NO_X = np.zeros(0)
TIE_TOL = 1e-12


@dataclass
class StackelbergGame:
    n_states: int
    n_leader: int
    n_follower: int
    gamma: float
    tau: float
    reg_leader: Regularizer
    reg_follower: Regularizer
    r_leader: np.ndarray
    r_follower: np.ndarray
    transition: np.ndarray
    initial_dist: np.ndarray

    def __post_init__(self) -> None:
        shape = (self.n_states, self.n_leader, self.n_follower)
        for name in ("r_leader", "r_follower"):
            table = np.asarray(getattr(self, name), dtype=float)
            if table.shape != shape or not np.all(np.isfinite(table)):
                raise ValidationError(f"{name} must be a finite {shape} tensor")
            setattr(self, name, table)
        self.transition = check_stochastic(self.transition, "joint transition")
        if self.transition.shape != shape + (self.n_states,):
            raise ValidationError("joint transition must be |S|x|A_l|x|A_f|x|S|")
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)

    @property
    def n_leader_params(self) -> int:
        return self.n_states * self.n_leader

    def leader_probs(self, x: np.ndarray) -> np.ndarray:
        return softmax_materialize(np.asarray(x, dtype=float).reshape(self.n_states, self.n_leader))

    def follower_mdp(self) -> ParamMDP:
        return stackelberg_reduce(self)

    def leader_view(self, follower: np.ndarray) -> ParamMDP:
        """Leader's MDP with the follower fixed; value V_l with the leader's regularizer."""
        reward = np.einsum("sc,sbc->sb", follower, self.r_leader)
        P = np.einsum("sc,sbct->sbt", follower, self.transition)
        return ParamMDP.tabular(reward, P, self.gamma, self.tau, self.reg_leader, self.initial_dist)

    def leader_reward_on_follower(self, x: np.ndarray) -> ParamMDP:
        """Follower-action MDP whose unregularized value is V_l (leader term folded into the reward)."""
        lp = self.leader_probs(x)
        h_l = self.reg_leader.values(lp) if self.tau > 0 else np.zeros(self.n_states)
        reward = np.einsum("sb,sbc->sc", lp, self.r_leader) - self.tau * h_l[:, None]
        P = np.einsum("sb,sbct->sct", lp, self.transition)
        return ParamMDP.tabular(reward, P, self.gamma, 0.0, Regularizer.none(), self.initial_dist)

    def leader_value(self, x: np.ndarray, follower: np.ndarray) -> float:
        return expected_value(self.leader_view(follower), NO_X, self.leader_probs(x))

    def leader_gradient(self, x: np.ndarray, follower: np.ndarray, mc: Optional[MCConfig] = None) -> np.ndarray:
        """grad_x V_l through the softmax leader parameterization."""
        view = self.leader_view(follower)
        lp = self.leader_probs(x)
        g = policy_gradient_exact(view, NO_X, lp) if mc is None else mc_policy_gradient(view, NO_X, lp, mc)
        return softmax_chain_gradient(np.asarray(x, dtype=float).reshape(lp.shape), g).ravel()

    def follower_value(self, x: np.ndarray, follower: np.ndarray) -> float:
        return expected_value(self.follower_mdp(), x, follower)

    def metrics(self, x: np.ndarray, follower: np.ndarray) -> Dict[str, float]:
        return {"leader_value": self.leader_value(x, follower), "follower_value": self.follower_value(x, follower)}


def stackelberg_reduce(game: StackelbergGame, x: Optional[np.ndarray] = None) -> ParamMDP:
    """Follower-view MDP: r_x(s, a_f) = E_{a_l ~ pi_x}[r_f], P_x = E_{a_l ~ pi_x}[P]."""
    mdp = ParamMDP(
        game.n_states,
        game.n_follower,
        game.gamma,
        game.tau,
        game.reg_follower,
        LeaderMixtureMap(game.r_follower),
        LeaderMixtureMap(game.transition),
        game.initial_dist,
    )
    if x is not None:
        mdp.transition(mdp.transition_map.check_x(x))
    return mdp


def joint_chain_values(game: StackelbergGame, x: np.ndarray, follower: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(V_l, V_f) from a direct solve on the joint leader-follower chain."""
    lp = game.leader_probs(x)
    joint = np.einsum("sb,sc->sbc", lp, follower)
    P = np.einsum("sbc,sbct->st", joint, game.transition)
    lhs = np.eye(game.n_states) - game.gamma * P
    h_l = game.reg_leader.values(lp) if game.tau > 0 else 0.0
    h_f = game.reg_follower.values(follower) if game.tau > 0 else 0.0
    r_l = np.einsum("sbc,sbc->s", joint, game.r_leader) - game.tau * h_l
    r_f = np.einsum("sbc,sbc->s", joint, game.r_follower) - game.tau * h_f
    return np.linalg.solve(lhs, r_l), np.linalg.solve(lhs, r_f)


@dataclass
class LeaderObjective(UpperObjective):
    """f(x, y) = -V_l(rho) under (pi_x, pi_y)."""

    game: StackelbergGame

    def evaluate(self, x: np.ndarray, pi: np.ndarray) -> float:
        return -self.game.leader_value(x, pi)

    def grad(self, x: np.ndarray, pi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        gx = -self.game.leader_gradient(x, pi)
        gy = -policy_gradient_exact(self.game.leader_reward_on_follower(x), NO_X, pi)
        return gx, gy


def stackelberg_problem(game: StackelbergGame, x0: Optional[np.ndarray] = None) -> BilevelProblem:
    return BilevelProblem(
        mdp=game.follower_mdp(),
        upper=LeaderObjective(game),
        x0=np.zeros(game.n_leader_params) if x0 is None else np.asarray(x0, dtype=float),
        metrics=game.metrics,
        name="stackelberg",
    )


@dataclass(frozen=True)
class PreferenceDataset:
    """Segment pairs as (states, actions) arrays of shape (n_pairs, T); label0[i] = 1 if segment 0 won."""

    states0: np.ndarray
    actions0: np.ndarray
    states1: np.ndarray
    actions1: np.ndarray
    label0: np.ndarray
    ties: int = 0

    def __post_init__(self) -> None:
        shapes = {a.shape for a in (self.states0, self.actions0, self.states1, self.actions1)}
        if len(shapes) != 1:
            raise ValidationError("segment arrays must share one (n_pairs, T) shape")
        if self.label0.shape != self.states0.shape[:1] or not np.all(np.isin(self.label0, (0.0, 1.0))):
            raise ValidationError("labels must be one-hot, one per pair")

    @property
    def n_pairs(self) -> int:
        return self.states0.shape[0]

    @property
    def segment_length(self) -> int:
        return self.states0.shape[1]

    def count_difference(self, n_states: int, n_actions: int) -> np.ndarray:
        """(n_pairs, S, A) visit counts of segment 0 minus segment 1."""
        diff = np.zeros((self.n_pairs, n_states, n_actions))
        rows = np.repeat(np.arange(self.n_pairs), self.segment_length)
        np.add.at(diff, (rows, self.states0.ravel(), self.actions0.ravel()), 1.0)
        np.add.at(diff, (rows, self.states1.ravel(), self.actions1.ravel()), -1.0)
        return diff


def collect_and_label_segments(
    mdp: ParamMDP,
    true_reward: np.ndarray,
    pi: np.ndarray,
    T: int,
    n_pairs: int,
    seed: int,
    x: Optional[np.ndarray] = None,
) -> PreferenceDataset:
    """Roll out 2 * n_pairs segments under pi and prefer the higher true return."""
    rng = make_rng(seed, stream=1)
    x = np.zeros(mdp.dim_x) if x is None else x
    traj = rollout(mdp, x, np.asarray(pi, dtype=float), T, 2 * n_pairs, rng)
    returns = np.asarray(true_reward, dtype=float)[traj.states, traj.actions].sum(axis=1)
    r0, r1 = returns[:n_pairs], returns[n_pairs:]
    tied = np.abs(r0 - r1) <= TIE_TOL
    label0 = np.where(r0 >= r1, 1.0, 0.0)
    label0[tied] = 1.0
    ties = int(tied.sum())
    if ties:
        logger.warning("%d of %d segment pairs tied on true return; labeled for the first segment", ties, n_pairs)
    return PreferenceDataset(
        traj.states[:n_pairs], traj.actions[:n_pairs], traj.states[n_pairs:], traj.actions[n_pairs:], label0, ties
    )


@dataclass
class PreferenceObjective(UpperObjective):
    """Bradley-Terry negative log-likelihood of the labels under segment reward sums of r_x."""

    dataset: PreferenceDataset
    reward_map: ParamMap

    def __post_init__(self) -> None:
        if self.dataset.n_pairs == 0:
            raise ValidationError("preference dataset is empty")
        n_s, n_a = self.reward_map.out_shape
        self._diff = self.dataset.count_difference(n_s, n_a)

    def margins(self, x: np.ndarray) -> np.ndarray:
        """R(d0) - R(d1) under r_x for every pair."""
        return np.einsum("nsa,sa->n", self._diff, self.reward_map.evaluate(x))

    def evaluate(self, x: np.ndarray, pi: Optional[np.ndarray] = None) -> float:
        delta = self.margins(x)
        l0 = self.dataset.label0
        # -log sigmoid(z) = logaddexp(0, -z)
        return float(np.sum(l0 * np.logaddexp(0.0, -delta) + (1.0 - l0) * np.logaddexp(0.0, delta)))

    def grad(self, x: np.ndarray, pi: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        residual = expit(self.margins(x)) - self.dataset.label0
        gx = np.einsum("n,nsa,sad->d", residual, self._diff, self.reward_map.jacobian(x))
        gy = np.zeros(self.reward_map.out_shape) if pi is None else np.zeros_like(np.asarray(pi, dtype=float))
        return gx, gy


def preference_upper_objective(dataset: PreferenceDataset, reward_map: ParamMap) -> PreferenceObjective:
    return PreferenceObjective(dataset, reward_map)


def fit_reward_from_preferences(
    mdp: ParamMDP,
    dataset: PreferenceDataset,
    cfg: PBRLConfig,
    x0: Optional[np.ndarray] = None,
    truth: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, RunTrace]:
    """Reward table learned through the bilevel loop; lam = 0 fits the reward alone.

    With truth given, every iteration records reward_rank_tau against it and
    true_return, the follower policy's regularized return under the true reward.
    """
    reward_map = TableMap((mdp.n_states, mdp.n_actions))
    learner = mdp.with_reward_map(reward_map)
    metrics = None
    if truth is not None:
        scorer = mdp.with_reward_map(ConstantMap(np.asarray(truth, dtype=float), reward_map.dim_x))

        def metrics(x: np.ndarray, pi: np.ndarray) -> Dict[str, float]:
            return {"reward_rank_tau": reward_ranking_score(x, truth), "true_return": expected_value(scorer, x, pi)}

    problem = BilevelProblem(
        mdp=learner,
        upper=preference_upper_objective(dataset, reward_map),
        x0=np.zeros(reward_map.dim_x) if x0 is None else x0,
        metrics=metrics,
        name="preference",
    )
    trace = pbrl_run(problem, cfg)
    return np.asarray(trace.summary["final_x"]).reshape(mdp.n_states, mdp.n_actions), trace


def reward_ranking_score(learned: np.ndarray, truth: np.ndarray) -> float:
    """Kendall tau between learned and true state-action rewards."""
    tau, _ = kendalltau(np.ravel(learned), np.ravel(truth))
    return float(tau)


@dataclass
class ShapingObjective(UpperObjective):
    """f(x, y) = -V(rho) of pi_y under the original reward; x enters only through the lower level."""

    original: ParamMDP
    dim_x: int

    def evaluate(self, x: np.ndarray, pi: np.ndarray) -> float:
        return -expected_value(self.original, NO_X, pi)

    def grad(self, x: np.ndarray, pi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return np.zeros(self.dim_x), -policy_gradient_exact(self.original, NO_X, pi)


def reward_shaping_objective(original: ParamMDP, shaped_map: ParamMap) -> ShapingObjective:
    if original.dim_x != 0 or original.reward_map.depends_on_x:
        raise ValidationError("the original MDP must not depend on the shaping parameter")
    if shaped_map.out_shape != (original.n_states, original.n_actions):
        raise ValidationError(f"shaped reward has shape {shaped_map.out_shape}, expected the original's")
    return ShapingObjective(original, shaped_map.dim_x)


def shaping_problem(original: ParamMDP, shaped_map: ParamMap, x0: Optional[np.ndarray] = None) -> BilevelProblem:
    upper = reward_shaping_objective(original, shaped_map)
    shaped = original.with_reward_map(shaped_map)
    return BilevelProblem(
        mdp=shaped,
        upper=upper,
        x0=np.zeros(shaped_map.dim_x) if x0 is None else np.asarray(x0, dtype=float),
        metrics=lambda x, pi: {"original_return": -upper.evaluate(x, pi)},
        name="shaping",
    )


@dataclass
class DesignerSpec:
    transition: np.ndarray
    reward: np.ndarray
    cost: np.ndarray
    gamma: float
    initial_dist: np.ndarray

    def __post_init__(self) -> None:
        self.transition = check_stochastic(self.transition, "designer transition")
        self.reward = np.asarray(self.reward, dtype=float)
        self.cost = np.asarray(self.cost, dtype=float)
        if self.transition.shape[:3] != self.reward.shape or self.cost.shape != self.reward.shape[:1]:
            raise ValidationError("designer reward must be |S|x|A1|x|A2| and cost |S|")


@dataclass
class DesignerObjective(JointObjective):
    """f(pi) = -E[sum_t gamma^t (r_id - c)] on the designer's chain; x-independent."""

    designer: DesignerSpec
    dim_x: int

    def _view(self, opponent: np.ndarray, player: int) -> ParamMDP:
        net = self.designer.reward - self.designer.cost[:, None, None]
        if player == 1:
            reward = np.einsum("sc,sbc->sb", opponent, net)
            P = np.einsum("sc,sbct->sbt", opponent, self.designer.transition)
        else:
            reward = np.einsum("sb,sbc->sc", opponent, net)
            P = np.einsum("sb,sbct->sct", opponent, self.designer.transition)
        return ParamMDP.tabular(reward, P, self.designer.gamma, 0.0, Regularizer.none(), self.designer.initial_dist)

    def designer_value(self, joint: JointPolicy) -> float:
        return expected_value(self._view(joint.pi2, 1), NO_X, joint.pi1)

    def evaluate(self, x: np.ndarray, joint: JointPolicy) -> float:
        return -self.designer_value(joint)

    def grad(self, x: np.ndarray, joint: JointPolicy):
        g1 = -policy_gradient_exact(self._view(joint.pi2, 1), NO_X, joint.pi1)
        g2 = -policy_gradient_exact(self._view(joint.pi1, 2), NO_X, joint.pi2)
        return np.zeros(self.dim_x), g1, g2


def incentive_problem(
    designer: DesignerSpec, game: ZeroSumGame, x0: Optional[np.ndarray] = None
) -> ZeroSumBilevelProblem:
    if designer.transition.shape != game.transition.shape:
        raise ValidationError("designer and game must share the state and action spaces")
    upper = DesignerObjective(designer, game.dim_x)
    return ZeroSumBilevelProblem(
        game=game,
        upper=upper,
        x0=np.zeros(game.dim_x) if x0 is None else np.asarray(x0, dtype=float),
        designer=upper,
        name="incentive",
    )


def fixed_incentive_baseline(problem: ZeroSumBilevelProblem, cfg: PBRLConfig) -> RunTrace:
    """Equilibrium seeking with x frozen at x0 and no designer term: the no-incentive-design reference."""
    x0 = np.asarray(problem.x0, dtype=float)
    frozen = replace(
        problem,
        upper=ZeroJointObjective(problem.game.dim_x),
        x_box=(x0, x0),
        designer=problem.designer or problem.upper,
        name=f"{problem.name}_fixed",
    )
    return pbrl_zs_run(frozen, cfg)

