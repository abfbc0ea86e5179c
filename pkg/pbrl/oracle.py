"""
Lower-level solvers producing an approximately optimal policy with a
certificate.

- pmd_solve: policy mirror descent in the regularizer's own mirror geometry
- soft_value_iteration: entropy-regularized soft Bellman iteration
- projected_pg_solve: exact projected policy-gradient ascent (any tau)
- brute_force_optimal: enumeration of deterministic policies (tau = 0)
- solve_lower_level: dispatcher with warm starts across outer iterations

Certificates come in two units. POLICY bounds max_{s,a} |pi_hat - pi*|;
VALUE bounds V*(rho) - V^pi_hat(rho). value_gap_bound turns either into a
value bound via the one-step improvement gap, which is always valid.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigError, UnsupportedStructureError, ValidationError
from .mdp_core import (
    ParamMDP,
    evaluate_q_exact,
    evaluate_value_exact,
    policy_gradient_exact,
)
from .policy import (
    Policy,
    PolicyLike,
    RegKind,
    as_probs,
    project_simplex_rows,
    regularized_argmin,
)

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 1_000_000
BRUTE_FORCE_AUTO_LIMIT = 4096
BRUTE_FORCE_CHUNK = 4096
TIE_TOL = 1e-9
# contraction checks allow this many ulps of |V| for roundoff
ROUNDOFF_ULPS = 1e3


class GapKind(str, Enum):
    POLICY = "policy"
    VALUE = "value"


@dataclass(frozen=True)
class OracleCertificate:
    policy_hat: Policy
    gap_bound: float
    gap_kind: GapKind
    iterations_used: int
    contraction: float = float("nan")

    def __post_init__(self) -> None:
        if not self.gap_bound >= 0.0:
            raise ValidationError(f"gap_bound must be nonnegative, got {self.gap_bound}")


@dataclass(frozen=True)
class OracleConfig:
    method: str = "auto"  # pmd | svi | ppg | brute | auto
    eta: float = 1.0
    T: int = 200
    tol: float = 1e-10
    certify: bool = False

    def __post_init__(self) -> None:
        if self.method not in ("auto", "pmd", "svi", "ppg", "brute"):
            raise ConfigError(f"unknown oracle method {self.method!r}")
        if self.eta <= 0.0:
            raise ConfigError("oracle step size eta must be positive")
        if self.T < 1:
            raise ConfigError("oracle iteration budget T must be >= 1")


def _start_probs(mdp: ParamMDP, warm_start: Optional[PolicyLike]) -> np.ndarray:
    if warm_start is None:
        return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    return np.array(as_probs(warm_start), dtype=float)


def pmd_solve(
    mdp: ParamMDP,
    x: np.ndarray,
    cfg: OracleConfig = OracleConfig(method="pmd"),
    warm_start: Optional[PolicyLike] = None,
) -> OracleCertificate:
    """xi <- (xi + eta Q) / (1 + eta tau); pi <- argmin_p h(p) - <p, xi>."""
    if mdp.tau <= 0.0:
        raise UnsupportedStructureError("pmd_solve needs tau > 0; use projected_pg_solve or brute_force_optimal")
    reg = mdp.regularizer
    pi = _start_probs(mdp, warm_start)
    xi = reg.grads(pi)
    decay = 1.0 + cfg.eta * mdp.tau
    steps = []
    it = 0
    for it in range(1, cfg.T + 1):
        Q = evaluate_q_exact(mdp, x, pi)
        xi = (xi + cfg.eta * Q) / decay
        new_pi = regularized_argmin(reg, -xi, 1.0)
        steps.append(float(np.max(np.abs(new_pi - pi))))
        pi = new_pi
        if steps[-1] < cfg.tol:
            break

    fallback = 1.0 - cfg.eta * mdp.tau * (1.0 - mdp.gamma) / decay
    contraction = fallback
    if len(steps) >= 2 and steps[-2] > 0.0:
        measured = steps[-1] / steps[-2]
        if measured < 1.0:
            contraction = measured
    gap = steps[-1] * contraction / (1.0 - contraction)
    cert = OracleCertificate(Policy.direct(pi), gap, GapKind.POLICY, it, contraction)
    logger.debug("pmd: %d iters, last step %.3e, contraction %.4f", it, steps[-1], contraction)
    if cfg.certify and reg.kind == RegKind.NEG_ENTROPY:
        ref = soft_value_iteration(mdp, x, tol=1e-12)
        measured_gap = float(np.max(np.abs(pi - ref.policy_hat.probs)))
        cert = OracleCertificate(Policy.direct(pi), measured_gap, GapKind.POLICY, it, contraction)
    return cert


def soft_value_iteration(
    mdp: ParamMDP,
    x: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> OracleCertificate:
    if mdp.regularizer.kind != RegKind.NEG_ENTROPY or mdp.tau <= 0.0:
        raise UnsupportedStructureError("soft value iteration needs the negative-entropy regularizer with tau > 0")
    tau, gamma = mdp.tau, mdp.gamma
    r = mdp.reward(x)
    P = mdp.transition(x)
    shift = tau * np.log(mdp.n_actions)
    V = np.zeros(mdp.n_states)
    prev_change = None
    change = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Q = r + gamma * P @ V
        V_new = tau * logsumexp(Q / tau, axis=1) - shift
        change = float(np.max(np.abs(V_new - V)))
        floor = ROUNDOFF_ULPS * np.finfo(float).eps * max(float(np.max(np.abs(V_new))), 1.0)
        if prev_change is not None and change > gamma * prev_change + floor:
            logger.warning(
                "soft VI sweep %d: change %.3e exceeds gamma=%.4f times the previous %.3e", it, change, gamma, prev_change
            )
        V = V_new
        prev_change = change
        if change <= tol * (1.0 - gamma):
            break
    Q = r + gamma * P @ V
    pi = softmax(Q / tau, axis=1)
    # ||V - V*|| <= gamma * change / (1 - gamma); the greedy policy loses at most 2 gamma / (1 - gamma) times that
    gap = 2.0 * gamma**2 * change / (1.0 - gamma) ** 2
    return OracleCertificate(Policy.direct(pi), gap, GapKind.VALUE, it, gamma)


def dominance_gap(grad: np.ndarray, pi: PolicyLike) -> float:
    """max over the simplex product of <grad, pi' - pi>, attained at per-state argmax."""
    probs = as_probs(pi)
    g = np.asarray(grad, dtype=float)
    return float(np.sum(g.max(axis=1) - np.sum(probs * g, axis=1)))


def projected_pg_solve(
    mdp: ParamMDP,
    x: np.ndarray,
    cfg: OracleConfig = OracleConfig(method="ppg", eta=0.1, T=1000),
    warm_start: Optional[PolicyLike] = None,
) -> OracleCertificate:
    pi = _start_probs(mdp, warm_start)
    it = 0
    for it in range(1, cfg.T + 1):
        grad = policy_gradient_exact(mdp, x, pi)
        new_pi = project_simplex_rows(pi + cfg.eta * grad)
        moved = float(np.max(np.abs(new_pi - pi)))
        pi = new_pi
        if moved < cfg.tol:
            break
    grad = policy_gradient_exact(mdp, x, pi)
    mapping = float(np.linalg.norm((project_simplex_rows(pi + cfg.eta * grad) - pi) / cfg.eta))
    bound = dominance_gap(grad, pi) / ((1.0 - mdp.gamma) * mdp.initial_dist.min())
    logger.debug("ppg: %d iters, gradient mapping %.3e, value bound %.3e", it, mapping, bound)
    return OracleCertificate(Policy.direct(pi), max(bound, 0.0), GapKind.VALUE, it, float("nan"))


def brute_force_optimal(mdp: ParamMDP, x: np.ndarray) -> OracleCertificate:
    if mdp.tau > 0.0:
        raise UnsupportedStructureError("brute force enumeration is only exact for tau = 0")
    n_s, n_a = mdp.n_states, mdp.n_actions
    count = n_a ** n_s
    if count > BRUTE_FORCE_LIMIT:
        raise UnsupportedStructureError(f"|A|^|S| = {count} exceeds the enumeration limit {BRUTE_FORCE_LIMIT}")
    r = mdp.reward(x)
    P = mdp.transition(x)
    rows = np.arange(n_s)
    eye = np.eye(n_s)
    best_val = -np.inf
    best_actions = None
    values = []
    combos = itertools.product(range(n_a), repeat=n_s)
    while True:
        chunk = np.array(list(itertools.islice(combos, BRUTE_FORCE_CHUNK)), dtype=np.int64)
        if chunk.size == 0:
            break
        r_pi = r[rows, chunk]
        P_pi = P[rows, chunk]
        V = np.linalg.solve(eye - mdp.gamma * P_pi, r_pi[..., None])[..., 0]
        scores = V @ mdp.initial_dist
        values.append(scores)
        k = int(np.argmax(scores))
        if scores[k] > best_val:
            best_val = float(scores[k])
            best_actions = chunk[k]
    all_scores = np.concatenate(values)
    n_ties = int(np.sum(all_scores >= best_val - TIE_TOL))
    if n_ties > 1:
        logger.warning("brute force: %d deterministic policies within %.0e of the optimum; using the first", n_ties, TIE_TOL)
    pi = np.zeros((n_s, n_a))
    pi[rows, best_actions] = 1.0
    # one model sweep, whatever the enumeration size
    return OracleCertificate(Policy.direct(pi), 0.0, GapKind.VALUE, 1)


def solve_lower_level(
    mdp: ParamMDP,
    x: np.ndarray,
    cfg: OracleConfig,
    warm_start: Optional[PolicyLike] = None,
) -> OracleCertificate:
    method = cfg.method
    if method == "auto":
        if mdp.tau > 0.0:
            method = "pmd"
        elif mdp.n_actions ** mdp.n_states <= BRUTE_FORCE_AUTO_LIMIT:
            method = "brute"
        else:
            method = "ppg"
    if method == "pmd":
        return pmd_solve(mdp, x, cfg, warm_start)
    if method == "svi":
        return soft_value_iteration(mdp, x, tol=cfg.tol)
    if method == "ppg":
        return projected_pg_solve(mdp, x, cfg, warm_start)
    return brute_force_optimal(mdp, x)


def tight_solve(mdp: ParamMDP, x: np.ndarray) -> OracleCertificate:
    """Reference solve used for metrics and exact gradients, never by the algorithm itself."""
    if mdp.tau > 0.0 and mdp.regularizer.kind == RegKind.NEG_ENTROPY:
        return soft_value_iteration(mdp, x, tol=1e-12)
    if mdp.tau > 0.0:
        return pmd_solve(mdp, x, OracleConfig(method="pmd", eta=100.0, T=20_000, tol=1e-13))
    if mdp.n_actions ** mdp.n_states <= BRUTE_FORCE_LIMIT:
        return brute_force_optimal(mdp, x)
    return projected_pg_solve(mdp, x, OracleConfig(method="ppg", eta=1.0, T=20_000, tol=1e-13))


def improvement_gap(mdp: ParamMDP, x: np.ndarray, pi: PolicyLike) -> np.ndarray:
    """Per-state max_p <p, Q^pi> - tau h(p) minus V^pi; nonnegative."""
    probs = as_probs(pi)
    V = evaluate_value_exact(mdp, x, probs)
    Q = evaluate_q_exact(mdp, x, probs, V)
    if mdp.tau > 0.0:
        best = regularized_argmin(mdp.regularizer, -Q, mdp.tau)
        top = np.sum(best * Q, axis=1) - mdp.tau * mdp.regularizer.values(best)
    else:
        top = Q.max(axis=1)
    return np.maximum(top - V, 0.0)


def value_gap_bound(cert: OracleCertificate, mdp: ParamMDP, x: np.ndarray) -> float:
    """Upper bound on V*(rho) - V^pi_hat(rho) by performance difference."""
    bound = float(improvement_gap(mdp, x, cert.policy_hat).max()) / (1.0 - mdp.gamma)
    if cert.gap_kind == GapKind.VALUE:
        return min(bound, cert.gap_bound)
    return bound
