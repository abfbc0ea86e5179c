"""
Parameterized regularized tabular MDPs M_tau(x).

Exact evaluation is a dense linear solve on the policy-averaged chain,
O(|S|^3) per call. Gradients with respect to x are assembled from the one-step
sensitivity G(s,a) = grad_x [ r_x(s,a) + gamma * P_x(.|s,a) . V ] (V held
fixed), propagated through (I - gamma P^pi)^-1.

Transition maps that depend on x must provide `contract(x, v)`, i.e. the
vector sum_{s'} grad_x P_x(s'|s,a) v(s'). The leader-mixture map used by the
Stackelberg reduction provides it in score-function form. Other x-dependent
transitions raise UnsupportedStructureError.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.special import expit

from .errors import UnsupportedStructureError, ValidationError
from .policy import (
    PolicyLike,
    Regularizer,
    as_probs,
    check_stochastic,
    require_direct,
    softmax_jacobian,
    softmax_materialize,
    validate_regularization,
)

logger = logging.getLogger(__name__)

SOLVE_RESIDUAL_TOL = 1e-10


class ParamMap:
    """x -> tensor, with a dense Jacobian of shape out_shape + (dim_x,)."""

    dim_x: int
    out_shape: Tuple[int, ...]
    depends_on_x: bool = True

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contract(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """sum over the last output axis of jacobian * v; shape out_shape[:-1] + (dim_x,)."""
        if not self.depends_on_x:
            return np.zeros(self.out_shape[:-1] + (self.dim_x,))
        raise UnsupportedStructureError(
            f"{type(self).__name__} has no registered score-function contraction for x-dependent transitions"
        )

    def check_x(self, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=float).reshape(-1)
        if arr.size != self.dim_x:
            raise ValidationError(f"parameter has size {arr.size}, expected {self.dim_x}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("parameter x must be finite")
        return arr


@dataclass
class ConstantMap(ParamMap):
    value: np.ndarray
    dim_x: int = 0
    depends_on_x: bool = field(default=False, init=False)

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=float)
        self.out_shape = self.value.shape

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        self.check_x(x)
        return self.value

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        self.check_x(x)
        return np.zeros(self.out_shape + (self.dim_x,))


@dataclass
class TableMap(ParamMap):
    """r_x = x, reshaped to a reward table."""

    shape: Tuple[int, ...]

    def __post_init__(self) -> None:
        self.shape = tuple(self.shape)
        self.out_shape = self.shape
        self.dim_x = int(np.prod(self.shape))

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return self.check_x(x).reshape(self.shape)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        self.check_x(x)
        return np.eye(self.dim_x).reshape(self.shape + (self.dim_x,))


@dataclass
class IncentiveMap(ParamMap):
    """r_x = base + scale * sigmoid(x), elementwise over the base table."""

    base: np.ndarray
    scale: float = 0.2

    def __post_init__(self) -> None:
        self.base = np.asarray(self.base, dtype=float)
        self.out_shape = self.base.shape
        self.dim_x = self.base.size

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return self.base + self.scale * expit(self.check_x(x)).reshape(self.out_shape)

    def derivative(self, x: np.ndarray) -> np.ndarray:
        sig = expit(self.check_x(x))
        return (self.scale * sig * (1.0 - sig)).reshape(self.out_shape)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return np.diag(self.derivative(x).reshape(-1)).reshape(self.out_shape + (self.dim_x,))


@dataclass
class LeaderMixtureMap(ParamMap):
    """Average of a joint tensor over a softmax-parameterized leader action.

    joint has shape (S, A_l, ...) and x holds the leader logits (S x A_l).
    The output is sum_{a_l} pi_x(a_l|s) joint[s, a_l, ...].
    """

    joint: np.ndarray

    def __post_init__(self) -> None:
        self.joint = np.asarray(self.joint, dtype=float)
        self.n_states, self.n_leader = self.joint.shape[:2]
        self.out_shape = (self.n_states,) + self.joint.shape[2:]
        self.dim_x = self.n_states * self.n_leader

    def leader_probs(self, x: np.ndarray) -> np.ndarray:
        return softmax_materialize(self.check_x(x).reshape(self.n_states, self.n_leader))

    def leader_jacobian(self, x: np.ndarray) -> np.ndarray:
        return softmax_jacobian(self.check_x(x).reshape(self.n_states, self.n_leader))

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("sl,sl...->s...", self.leader_probs(x), self.joint)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("sld,sl...->s...d", self.leader_jacobian(x), self.joint)

    def contract(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        # score-function form: sum_l pi_x(l|s) grad log pi_x(l|s) * (P(.|s,l,a) . v)
        inner = self.joint @ np.asarray(v, dtype=float)
        return np.einsum("sld,sl...->s...d", self.leader_jacobian(x), inner)


@dataclass
class ParamMDP:
    n_states: int
    n_actions: int
    gamma: float
    tau: float
    regularizer: Regularizer
    reward_map: ParamMap
    transition_map: ParamMap
    initial_dist: np.ndarray

    def __post_init__(self) -> None:
        if self.n_states < 1 or self.n_actions < 1:
            raise ValidationError("an MDP needs at least one state and one action")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma}")
        validate_regularization(self.regularizer, self.tau)
        rho = check_stochastic(np.asarray(self.initial_dist, dtype=float)[None, :], "initial distribution")[0]
        if rho.shape != (self.n_states,) or rho.min() <= 0.0:
            raise ValidationError("initial distribution must be strictly positive on every state")
        self.initial_dist = rho
        if self.reward_map.out_shape != (self.n_states, self.n_actions):
            raise ValidationError(f"reward map produces {self.reward_map.out_shape}, expected (|S|, |A|)")
        if self.transition_map.out_shape != (self.n_states, self.n_actions, self.n_states):
            raise ValidationError("transition map must produce an |S|x|A|x|S| tensor")
        if self.transition_map.depends_on_x and self.reward_map.depends_on_x:
            if self.transition_map.dim_x != self.reward_map.dim_x:
                raise ValidationError("reward and transition maps disagree on dim_x")
        if not self.transition_map.depends_on_x:
            check_stochastic(self.transition_map.evaluate(np.zeros(self.transition_map.dim_x)), "transition")

    @classmethod
    def tabular(
        cls,
        reward: np.ndarray,
        transition: np.ndarray,
        gamma: float,
        tau: float = 0.0,
        regularizer: Optional[Regularizer] = None,
        initial_dist: Optional[np.ndarray] = None,
        reward_map: Optional[ParamMap] = None,
    ) -> "ParamMDP":
        reward = np.asarray(reward, dtype=float)
        n_s, n_a = reward.shape
        rmap = reward_map if reward_map is not None else ConstantMap(reward)
        reg = regularizer if regularizer is not None else (Regularizer.entropy() if tau > 0 else Regularizer.none())
        rho = np.full(n_s, 1.0 / n_s) if initial_dist is None else initial_dist
        return cls(n_s, n_a, gamma, tau, reg, rmap, ConstantMap(np.asarray(transition, dtype=float), rmap.dim_x), rho)

    @property
    def dim_x(self) -> int:
        if self.reward_map.depends_on_x:
            return self.reward_map.dim_x
        return self.transition_map.dim_x if self.transition_map.depends_on_x else self.reward_map.dim_x

    def reward(self, x: np.ndarray) -> np.ndarray:
        return self.reward_map.evaluate(x)

    def transition(self, x: np.ndarray) -> np.ndarray:
        P = self.transition_map.evaluate(x)
        if self.transition_map.depends_on_x:
            check_stochastic(P, "transition")
        return P

    def with_reward_map(self, reward_map: ParamMap) -> "ParamMDP":
        transition_map = self.transition_map
        if not transition_map.depends_on_x:
            P = transition_map.evaluate(np.zeros(transition_map.dim_x))
            transition_map = ConstantMap(P, reward_map.dim_x)
        return ParamMDP(
            self.n_states, self.n_actions, self.gamma, self.tau, self.regularizer,
            reward_map, transition_map, self.initial_dist,
        )


def _check_policy_shape(mdp: ParamMDP, probs: np.ndarray) -> None:
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValidationError(f"policy shape {probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})")


def policy_averages(mdp: ParamMDP, x: np.ndarray, probs: np.ndarray):
    """(r^pi, P^pi, h^pi) of the policy-averaged chain."""
    r = mdp.reward(x)
    P = mdp.transition(x)
    r_pi = np.sum(probs * r, axis=1)
    P_pi = np.einsum("sa,sat->st", probs, P)
    h_pi = mdp.regularizer.values(probs) if mdp.tau > 0 else np.zeros(mdp.n_states)
    return r_pi, P_pi, h_pi


def _solve(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    sol = np.linalg.solve(lhs, rhs)
    residual = float(np.max(np.abs(lhs @ sol - rhs))) if sol.size else 0.0
    scale = max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 1.0)
    # I - gamma P is nonsingular for gamma < 1; a large residual means broken inputs
    assert residual <= SOLVE_RESIDUAL_TOL * scale, f"linear solve residual {residual:.3e}"
    return sol


def evaluate_value_exact(mdp: ParamMDP, x: np.ndarray, pi: PolicyLike) -> np.ndarray:
    probs = as_probs(pi)
    _check_policy_shape(mdp, probs)
    r_pi, P_pi, h_pi = policy_averages(mdp, x, probs)
    lhs = np.eye(mdp.n_states) - mdp.gamma * P_pi
    return _solve(lhs, r_pi - mdp.tau * h_pi)


def evaluate_q_exact(mdp: ParamMDP, x: np.ndarray, pi: PolicyLike, values: Optional[np.ndarray] = None) -> np.ndarray:
    V = evaluate_value_exact(mdp, x, pi) if values is None else values
    return mdp.reward(x) + mdp.gamma * mdp.transition(x) @ V


def expected_value(mdp: ParamMDP, x: np.ndarray, pi: PolicyLike, start: Optional[np.ndarray] = None) -> float:
    rho = mdp.initial_dist if start is None else np.asarray(start, dtype=float)
    return float(rho @ evaluate_value_exact(mdp, x, pi))


def bellman_residual(mdp: ParamMDP, x: np.ndarray, pi: PolicyLike, V: np.ndarray, Q: np.ndarray) -> float:
    """max_s |V(s) - sum_a pi(a|s) Q(s,a) + tau h_s(pi(s))|."""
    probs = as_probs(pi)
    h = mdp.regularizer.values(probs) if mdp.tau > 0 else 0.0
    return float(np.max(np.abs(V - np.sum(probs * Q, axis=1) + mdp.tau * h)))


def visitation_distribution(
    mdp: ParamMDP, x: np.ndarray, pi: PolicyLike, start: Optional[np.ndarray] = None
) -> np.ndarray:
    probs = as_probs(pi)
    _check_policy_shape(mdp, probs)
    if start is None:
        start = mdp.initial_dist
    start = check_stochastic(np.asarray(start, dtype=float)[None, :], "start distribution")[0]
    _, P_pi, _ = policy_averages(mdp, x, probs)
    lhs = (np.eye(mdp.n_states) - mdp.gamma * P_pi).T
    return (1.0 - mdp.gamma) * _solve(lhs, start)


def policy_gradient_exact(
    mdp: ParamMDP, x: np.ndarray, pi: PolicyLike, start: Optional[np.ndarray] = None
) -> np.ndarray:
    """d V(rho) / d pi(a|s) for the direct parameterization."""
    probs = require_direct(pi, "policy_gradient_exact")
    V = evaluate_value_exact(mdp, x, probs)
    Q = evaluate_q_exact(mdp, x, probs, V)
    d = visitation_distribution(mdp, x, probs, start)
    if mdp.tau > 0:
        Q = Q - mdp.tau * mdp.regularizer.grads(probs)
    return d[:, None] * Q / (1.0 - mdp.gamma)


def one_step_sensitivity(mdp: ParamMDP, x: np.ndarray, V: np.ndarray) -> np.ndarray:
    """grad_x [r_x(s,a) + gamma P_x(.|s,a) . V] with V held fixed; shape (S, A, dim_x)."""
    G = mdp.reward_map.jacobian(x) if mdp.reward_map.depends_on_x else np.zeros(
        (mdp.n_states, mdp.n_actions, mdp.dim_x)
    )
    if mdp.transition_map.depends_on_x:
        G = G + mdp.gamma * mdp.transition_map.contract(x, V)
    return G


def _value_jacobian_x(mdp: ParamMDP, x: np.ndarray, probs: np.ndarray):
    V = evaluate_value_exact(mdp, x, probs)
    G = one_step_sensitivity(mdp, x, V)
    _, P_pi, _ = policy_averages(mdp, x, probs)
    lhs = np.eye(mdp.n_states) - mdp.gamma * P_pi
    dV = _solve(lhs, np.einsum("sa,sad->sd", probs, G))
    return V, G, dV


def value_gradient_x_exact(
    mdp: ParamMDP, x: np.ndarray, pi: PolicyLike, start: Optional[np.ndarray] = None
) -> np.ndarray:
    """grad_x V(rho) = 1/(1-gamma) sum_s d(s) sum_a pi(a|s) G(s,a)."""
    probs = as_probs(pi)
    _check_policy_shape(mdp, probs)
    rho = mdp.initial_dist if start is None else np.asarray(start, dtype=float)
    _, _, dV = _value_jacobian_x(mdp, x, probs)
    return rho @ dV


def q_gradient_x_exact(mdp: ParamMDP, x: np.ndarray, pi: PolicyLike) -> np.ndarray:
    """grad_x Q^pi(s,a) for a fixed policy; shape (S, A, dim_x)."""
    probs = as_probs(pi)
    _check_policy_shape(mdp, probs)
    _, G, dV = _value_jacobian_x(mdp, x, probs)
    return G + mdp.gamma * np.einsum("sat,td->sad", mdp.transition(x), dV)


def is_irreducible(mdp: ParamMDP, x: np.ndarray, pi: PolicyLike) -> bool:
    """Single strongly connected component of the chain induced by pi."""
    _, P_pi, _ = policy_averages(mdp, x, as_probs(pi))
    n_components, _ = connected_components(P_pi > 0.0, directed=True, connection="strong")
    return n_components == 1
