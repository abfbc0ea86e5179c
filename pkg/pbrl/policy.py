"""
Policy parameterizations and per-state regularizers.

- Direct (simplex) and softmax (logit) tabular policies
- Regularizers h_s: shifted negative entropy, KL to a reference, squared l2
- Euclidean projection onto the probability simplex (sort-based)
- Softmax materialization and its vector-Jacobian product

Strong convexity of every regularizer is stated in the Euclidean norm with
modulus 1. Negative entropy and KL are also 1-strongly convex in l1, which
implies the Euclidean statement since ||.||_1 >= ||.||_2.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import softmax

from .errors import ConfigError, ContractViolationError, ValidationError

SIMPLEX_ATOL = 1e-12
LOG_CLAMP = 1e-12


class ParamKind(str, Enum):
    DIRECT = "direct"
    SOFTMAX = "softmax"


class RegKind(str, Enum):
    NONE = "none"
    NEG_ENTROPY = "neg_entropy"
    KL = "kl"
    SQUARED_L2 = "squared_l2"


STRONG_CONVEXITY = {
    RegKind.NEG_ENTROPY: 1.0,
    RegKind.KL: 1.0,
    RegKind.SQUARED_L2: 1.0,
}


def check_stochastic(table: np.ndarray, name: str = "policy", atol: float = SIMPLEX_ATOL) -> np.ndarray:
    arr = np.asarray(table, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    if arr.min(initial=0.0) < -atol:
        raise ValidationError(f"{name} has negative entries (min={arr.min():.3e})")
    sums = arr.sum(axis=-1)
    worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    if worst > atol:
        raise ValidationError(f"{name} rows must sum to 1 (worst deviation {worst:.3e})")
    return arr


@dataclass(frozen=True)
class Regularizer:
    kind: RegKind = RegKind.NEG_ENTROPY
    # KL only: reference distribution per state (|S|x|A|) or shared (|A|,)
    reference: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.kind == RegKind.KL:
            if self.reference is None:
                raise ConfigError("KL regularizer needs a reference policy")
            ref = np.asarray(self.reference, dtype=float)
            if ref.min() <= 0.0:
                raise ConfigError("KL reference must be strictly positive")
            check_stochastic(ref, "KL reference")

    @classmethod
    def none(cls) -> "Regularizer":
        return cls(RegKind.NONE)

    @classmethod
    def entropy(cls) -> "Regularizer":
        return cls(RegKind.NEG_ENTROPY)

    @classmethod
    def kl(cls, reference: np.ndarray) -> "Regularizer":
        return cls(RegKind.KL, np.asarray(reference, dtype=float))

    @classmethod
    def squared_l2(cls) -> "Regularizer":
        return cls(RegKind.SQUARED_L2)

    @property
    def modulus(self) -> float:
        return STRONG_CONVEXITY.get(self.kind, 0.0)

    def _reference_rows(self, n_states: int) -> np.ndarray:
        ref = np.asarray(self.reference, dtype=float)
        return np.broadcast_to(ref, (n_states, ref.shape[-1])) if ref.ndim == 1 else ref

    def values(self, table: np.ndarray) -> np.ndarray:
        """h_s(table[s]) for every state."""
        p = np.atleast_2d(np.asarray(table, dtype=float))
        if self.kind == RegKind.NONE:
            return np.zeros(p.shape[0])
        if self.kind == RegKind.SQUARED_L2:
            return 0.5 * np.sum(p * p, axis=1)
        safe = np.maximum(p, LOG_CLAMP)
        if self.kind == RegKind.NEG_ENTROPY:
            plogp = np.where(p > 0.0, p * np.log(safe), 0.0)
            return plogp.sum(axis=1) + np.log(p.shape[1])
        ref = self._reference_rows(p.shape[0])
        terms = np.where(p > 0.0, p * (np.log(safe) - np.log(ref)), 0.0)
        return terms.sum(axis=1)

    def grads(self, table: np.ndarray) -> np.ndarray:
        """Gradient of h_s at table[s], stacked over states."""
        p = np.atleast_2d(np.asarray(table, dtype=float))
        if self.kind == RegKind.NONE:
            return np.zeros_like(p)
        if self.kind == RegKind.SQUARED_L2:
            return p.copy()
        safe = np.maximum(p, LOG_CLAMP)
        if self.kind == RegKind.NEG_ENTROPY:
            return np.log(safe) + 1.0
        return np.log(safe) - np.log(self._reference_rows(p.shape[0])) + 1.0


def regularizer_value_and_grad(reg: Regularizer, dist: np.ndarray, state: int = 0) -> Tuple[float, np.ndarray]:
    p = check_stochastic(np.asarray(dist, dtype=float)[None, :], "distribution")
    if reg.kind == RegKind.KL:
        ref = reg._reference_rows(state + 1)[state]
        per_state = Regularizer(RegKind.KL, ref)
        return float(per_state.values(p)[0]), per_state.grads(p)[0]
    return float(reg.values(p)[0]), reg.grads(p)[0]


def validate_regularization(reg: Regularizer, tau: float) -> None:
    if tau < 0.0:
        raise ConfigError(f"tau must be nonnegative, got {tau}")
    if reg.kind == RegKind.NONE and tau > 0.0:
        raise ConfigError("regularizer 'none' is only legal with tau = 0")


def project_simplex(v: np.ndarray) -> np.ndarray:
    vec = np.asarray(v, dtype=float)
    if vec.ndim != 1:
        raise ValidationError("project_simplex expects a vector; use project_simplex_rows for tables")
    return project_simplex_rows(vec[None, :])[0]


def project_simplex_rows(table: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto the probability simplex."""
    arr = np.atleast_2d(np.asarray(table, dtype=float))
    if not np.all(np.isfinite(arr)):
        raise ValidationError("cannot project non-finite values onto the simplex")
    n_rows, n = arr.shape
    u = -np.sort(-arr, axis=1)
    css = np.cumsum(u, axis=1)
    ks = np.arange(1, n + 1)
    support = u * ks > css - 1.0
    rho = support.sum(axis=1)
    theta = (css[np.arange(n_rows), rho - 1] - 1.0) / rho
    return np.maximum(arr - theta[:, None], 0.0)


def softmax_materialize(logits: np.ndarray) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(logits, dtype=float))
    if not np.all(np.isfinite(arr)):
        raise ValidationError("softmax logits must be finite")
    return softmax(arr, axis=1)


def softmax_chain_gradient(logits: np.ndarray, grad_wrt_pi: np.ndarray) -> np.ndarray:
    """J^T g per row, with J the softmax Jacobian: p * (g - <p, g>)."""
    p = softmax_materialize(logits)
    g = np.atleast_2d(np.asarray(grad_wrt_pi, dtype=float))
    return p * (g - np.sum(p * g, axis=1, keepdims=True))


def softmax_jacobian(logits: np.ndarray) -> np.ndarray:
    """Dense d pi(a|s) / d logits, shape (S, A, S*A)."""
    p = softmax_materialize(logits)
    n_s, n_a = p.shape
    jac = np.zeros((n_s, n_a, n_s, n_a))
    for s in range(n_s):
        jac[s, :, s, :] = np.diag(p[s]) - np.outer(p[s], p[s])
    return jac.reshape(n_s, n_a, n_s * n_a)


def regularized_argmin(reg: Regularizer, costs: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise argmin_p <p, c_s> + tau * h_s(p) over the simplex (closed forms)."""
    c = np.atleast_2d(np.asarray(costs, dtype=float))
    if tau <= 0.0:
        raise ConfigError("regularized argmin needs tau > 0")
    if reg.kind == RegKind.NEG_ENTROPY:
        return softmax(-c / tau, axis=1)
    if reg.kind == RegKind.KL:
        return softmax(-c / tau + np.log(reg._reference_rows(c.shape[0])), axis=1)
    if reg.kind == RegKind.SQUARED_L2:
        return project_simplex_rows(-c / tau)
    raise ConfigError("regularized argmin is undefined without a regularizer")


@dataclass(frozen=True)
class Policy:
    table: np.ndarray
    param_kind: ParamKind = ParamKind.DIRECT

    def __post_init__(self) -> None:
        arr = np.asarray(self.table, dtype=float)
        if arr.ndim != 2:
            raise ValidationError("policy table must be |S|x|A|")
        if self.param_kind == ParamKind.DIRECT:
            check_stochastic(arr, "direct policy")
        elif not np.all(np.isfinite(arr)):
            raise ValidationError("softmax logits must be finite")
        object.__setattr__(self, "table", arr)

    @classmethod
    def direct(cls, table: np.ndarray) -> "Policy":
        return cls(np.asarray(table, dtype=float), ParamKind.DIRECT)

    @classmethod
    def softmax(cls, logits: np.ndarray) -> "Policy":
        return cls(np.asarray(logits, dtype=float), ParamKind.SOFTMAX)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int, kind: ParamKind = ParamKind.DIRECT) -> "Policy":
        if kind == ParamKind.SOFTMAX:
            return cls(np.zeros((n_states, n_actions)), kind)
        return cls(np.full((n_states, n_actions), 1.0 / n_actions), kind)

    @property
    def probs(self) -> np.ndarray:
        if self.param_kind == ParamKind.SOFTMAX:
            return softmax_materialize(self.table)
        return self.table

    @property
    def n_states(self) -> int:
        return self.table.shape[0]

    @property
    def n_actions(self) -> int:
        return self.table.shape[1]


PolicyLike = Union[Policy, np.ndarray]


def as_probs(pi: PolicyLike) -> np.ndarray:
    if isinstance(pi, Policy):
        return pi.probs
    return check_stochastic(pi, "policy")


def require_direct(pi: PolicyLike, op: str) -> np.ndarray:
    if isinstance(pi, Policy) and pi.param_kind != ParamKind.DIRECT:
        raise ContractViolationError(
            f"{op} takes a direct (simplex) policy; chain softmax logits with softmax_chain_gradient"
        )
    return as_probs(pi)
