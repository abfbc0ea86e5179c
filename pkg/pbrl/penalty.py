"""
Penalty reformulations of the bilevel problem.

F_lambda(x, y) = f(x, y) + lambda * p(x, y), where p is either

- the value penalty   p = V*(rho) - V^pi(rho), or
- the Bellman penalty p = g(x, y) - v(x), g(x, y) = E_rho[<y_s, q_s(x)> + tau h_s(y_s)],
  q_s(x) = -Q*(s, .), v(x) = min_y g(x, y).

Both are evaluated from one oracle certificate per outer iteration; the
gradients replace pi* by the certificate's policy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import ConfigError, OracleFailureError, UnsupportedStructureError
from .mdp_core import (
    LeaderMixtureMap,
    ParamMDP,
    expected_value,
    evaluate_q_exact,
    policy_gradient_exact,
    q_gradient_x_exact,
    value_gradient_x_exact,
)
from .oracle import OracleCertificate, value_gap_bound
from .policy import PolicyLike, as_probs, regularized_argmin, require_direct

logger = logging.getLogger(__name__)

NEGATIVE_SLACK = 1e-8


class PenaltyKind(str, Enum):
    VALUE = "value"
    BELLMAN = "bellman"
    NIKAIDO_ISODA = "nikaido_isoda"


class Structure(str, Enum):
    REWARD_ONLY = "reward_only"
    STACKELBERG = "stackelberg"


@dataclass(frozen=True)
class PenaltySpec:
    kind: PenaltyKind
    lam: float

    def __post_init__(self) -> None:
        if self.lam < 0.0:
            raise ConfigError(f"penalty constant must be nonnegative, got {self.lam}")


@dataclass(frozen=True)
class PenaltyEval:
    value: float
    grad_x: np.ndarray
    grad_y: np.ndarray
    oracle_cert: OracleCertificate


class UpperObjective:
    """f(x, y) with y given as the materialized |S|x|A| policy."""

    def evaluate(self, x: np.ndarray, pi: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, x: np.ndarray, pi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


@dataclass
class CallableObjective(UpperObjective):
    evaluate_fn: Callable[[np.ndarray, np.ndarray], float]
    grad_fn: Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]

    def evaluate(self, x: np.ndarray, pi: np.ndarray) -> float:
        return float(self.evaluate_fn(x, pi))

    def grad(self, x: np.ndarray, pi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        gx, gy = self.grad_fn(x, pi)
        return np.asarray(gx, dtype=float), np.asarray(gy, dtype=float)


@dataclass
class ZeroObjective(UpperObjective):
    dim_x: int

    def evaluate(self, x: np.ndarray, pi: np.ndarray) -> float:
        return 0.0

    def grad(self, x: np.ndarray, pi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return np.zeros(self.dim_x), np.zeros_like(np.asarray(pi, dtype=float))


def infer_structure(mdp: ParamMDP) -> Structure:
    return Structure.STACKELBERG if mdp.transition_map.depends_on_x else Structure.REWARD_ONLY


def check_structure(mdp: ParamMDP, structure: Structure) -> None:
    if structure == Structure.REWARD_ONLY and mdp.transition_map.depends_on_x:
        raise UnsupportedStructureError("reward-only gradients requested but the transitions depend on x")
    if structure == Structure.STACKELBERG and not isinstance(mdp.transition_map, LeaderMixtureMap):
        raise UnsupportedStructureError("Stackelberg gradients need a leader-mixture transition map")


def value_penalty_eval(mdp: ParamMDP, x: np.ndarray, pi: PolicyLike, cert: OracleCertificate) -> float:
    p = expected_value(mdp, x, cert.policy_hat) - expected_value(mdp, x, pi)
    if p < 0.0:
        allowed = value_gap_bound(cert, mdp, x) + NEGATIVE_SLACK
        if p < -allowed:
            raise OracleFailureError(f"value penalty {p:.3e} is below the certified gap -{allowed:.3e}")
        return 0.0
    return float(p)


def value_penalty_grad(
    mdp: ParamMDP,
    x: np.ndarray,
    pi: PolicyLike,
    cert: OracleCertificate,
    structure: Optional[Structure] = None,
    policy_grad: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """policy_grad replaces the exact grad_pi V^pi (e.g. a Monte-Carlo estimate)."""
    check_structure(mdp, structure or infer_structure(mdp))
    probs = require_direct(pi, "value_penalty_grad")
    grad_y = -(policy_gradient_exact(mdp, x, probs) if policy_grad is None else policy_grad)
    grad_x = value_gradient_x_exact(mdp, x, cert.policy_hat) - value_gradient_x_exact(mdp, x, probs)
    return grad_x, grad_y


def _bellman_parts(mdp: ParamMDP, x: np.ndarray, cert: OracleCertificate):
    if mdp.tau <= 0.0:
        raise ConfigError("the Bellman penalty needs tau > 0")
    q = -evaluate_q_exact(mdp, x, cert.policy_hat)
    y_star = regularized_argmin(mdp.regularizer, q, mdp.tau)
    return q, y_star


def bellman_g(mdp: ParamMDP, q: np.ndarray, y: np.ndarray) -> float:
    per_state = np.sum(y * q, axis=1) + mdp.tau * mdp.regularizer.values(y)
    return float(mdp.initial_dist @ per_state)


def bellman_penalty_eval(mdp: ParamMDP, x: np.ndarray, pi: PolicyLike, cert: OracleCertificate) -> float:
    probs = require_direct(pi, "bellman_penalty_eval")
    q, y_star = _bellman_parts(mdp, x, cert)
    p = bellman_g(mdp, q, probs) - bellman_g(mdp, q, y_star)
    if p < -NEGATIVE_SLACK:
        raise OracleFailureError(f"Bellman penalty {p:.3e} is negative; the per-state minimization failed")
    return max(float(p), 0.0)


def bellman_penalty_grad(
    mdp: ParamMDP,
    x: np.ndarray,
    pi: PolicyLike,
    cert: OracleCertificate,
    structure: Optional[Structure] = None,
    q_hat: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """q_hat replaces Q of the oracle policy in the y-gradient (e.g. a Monte-Carlo estimate)."""
    check_structure(mdp, structure or infer_structure(mdp))
    probs = require_direct(pi, "bellman_penalty_grad")
    q, y_star = _bellman_parts(mdp, x, cert)
    rho = mdp.initial_dist[:, None]
    q_y = q if q_hat is None else -np.asarray(q_hat, dtype=float)
    grad_y = rho * (q_y + mdp.tau * mdp.regularizer.grads(probs))
    dQ = q_gradient_x_exact(mdp, x, cert.policy_hat)
    weights = rho * (y_star - probs)
    grad_x = np.einsum("sa,sad->d", weights, dQ)
    return grad_x, grad_y


def evaluate_penalty(
    kind: PenaltyKind,
    mdp: ParamMDP,
    x: np.ndarray,
    pi: PolicyLike,
    cert: OracleCertificate,
    structure: Optional[Structure] = None,
    policy_grad: Optional[np.ndarray] = None,
    q_hat: Optional[np.ndarray] = None,
) -> PenaltyEval:
    if kind == PenaltyKind.VALUE:
        value = value_penalty_eval(mdp, x, pi, cert)
        gx, gy = value_penalty_grad(mdp, x, pi, cert, structure, policy_grad)
    elif kind == PenaltyKind.BELLMAN:
        value = bellman_penalty_eval(mdp, x, pi, cert)
        gx, gy = bellman_penalty_grad(mdp, x, pi, cert, structure, q_hat)
    else:
        raise ConfigError("the Nikaido-Isoda penalty is only defined for a zero-sum lower level")
    return PenaltyEval(value, gx, gy, cert)


@dataclass(frozen=True)
class PenalizedEval:
    F: float
    f: float
    p: float
    grad_x: np.ndarray
    grad_y: np.ndarray


def penalized_objective(
    upper: UpperObjective,
    spec: PenaltySpec,
    mdp: ParamMDP,
    x: np.ndarray,
    pi: PolicyLike,
    cert: OracleCertificate,
    structure: Optional[Structure] = None,
    policy_grad: Optional[np.ndarray] = None,
    q_hat: Optional[np.ndarray] = None,
) -> PenalizedEval:
    probs = as_probs(pi)
    f = upper.evaluate(x, probs)
    fx, fy = upper.grad(x, probs)
    if spec.lam == 0.0:
        return PenalizedEval(f, f, 0.0, fx, fy)
    pen = evaluate_penalty(spec.kind, mdp, x, probs, cert, structure, policy_grad, q_hat)
    return PenalizedEval(
        F=f + spec.lam * pen.value,
        f=f,
        p=pen.value,
        grad_x=fx + spec.lam * pen.grad_x,
        grad_y=fy + spec.lam * pen.grad_y,
    )


def feasible_diameter(n_states: int, box: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> float:
    """Euclidean diameter of the feasible set: sqrt(2) per simplex plus the box diagonal."""
    sq = 2.0 * n_states
    if box is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in box)
        sq += float(np.sum((hi - lo) ** 2))
    return float(np.sqrt(sq))
