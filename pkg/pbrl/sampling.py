"""
Monte-Carlo rollouts and the REINFORCE-with-Q policy-gradient estimator.

Trajectories are truncated at a fixed length. The truncation bias of the gradient estimate is at most
gamma^traj_len * V_max / (1 - gamma) per entry and is not corrected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ValidationError
from .mdp_core import ParamMDP
from .policy import PolicyLike, require_direct

logger = logging.getLogger(__name__)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, stream)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class MCConfig:
    traj_len: int = 5
    batch: int = 16
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.traj_len < 1 or self.batch < 1:
            raise ValidationError(f"traj_len and batch must be >= 1, got {self.traj_len}, {self.batch}")

    @property
    def env_steps(self) -> int:
        return self.traj_len * self.batch


@dataclass(frozen=True)
class Trajectory:
    """A batch of equal-length rollouts; row b is one trajectory."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    reg_values: np.ndarray
    discounts: np.ndarray

    @property
    def length(self) -> int:
        return self.states.shape[1]

    @property
    def batch(self) -> int:
        return self.states.shape[0]


def sample_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of probs."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None]
    idx = (u > cdf).sum(axis=1)
    # u past a row's rounded-down total lands on its last action with positive mass
    over = idx >= probs.shape[1]
    if np.any(over):
        last_positive = probs.shape[1] - 1 - np.argmax(probs[over, ::-1] > 0.0, axis=1)
        idx[over] = last_positive
    return idx


def rollout(
    mdp: ParamMDP,
    x: np.ndarray,
    probs: np.ndarray,
    traj_len: int,
    batch: int,
    rng: np.random.Generator,
    start: Optional[np.ndarray] = None,
) -> Trajectory:
    if traj_len < 1 or batch < 1:
        raise ValidationError("traj_len and batch must be >= 1")
    rho = mdp.initial_dist if start is None else np.asarray(start, dtype=float)
    s0 = sample_rows(rng, np.broadcast_to(rho, (batch, mdp.n_states)))
    return _rollout_from(mdp, x, probs, s0, None, traj_len, rng)


def _rollout_from(
    mdp: ParamMDP,
    x: np.ndarray,
    probs: np.ndarray,
    s0: np.ndarray,
    a0: Optional[np.ndarray],
    traj_len: int,
    rng: np.random.Generator,
) -> Trajectory:
    """Rollouts from the given start states; a0, when given, fixes the first action."""
    r = mdp.reward(x)
    P = mdp.transition(x)
    h = mdp.regularizer.values(probs) if mdp.tau > 0 else np.zeros(mdp.n_states)

    batch = s0.shape[0]
    states = np.empty((batch, traj_len), dtype=np.int64)
    actions = np.empty((batch, traj_len), dtype=np.int64)
    s = s0
    for t in range(traj_len):
        a = a0 if t == 0 and a0 is not None else sample_rows(rng, probs[s])
        states[:, t] = s
        actions[:, t] = a
        if t + 1 < traj_len:
            s = sample_rows(rng, P[s, a])
    return Trajectory(
        states=states,
        actions=actions,
        rewards=r[states, actions],
        reg_values=mdp.tau * h[states],
        discounts=mdp.gamma ** np.arange(traj_len),
    )


def q_returns(traj: Trajectory, gamma: float) -> np.ndarray:
    """Truncated regularized returns: r_t + sum_{k>t} gamma^(k-t) (r_k - tau h(s_k))."""
    T = traj.length
    out = np.zeros_like(traj.rewards)
    tail = np.zeros(traj.batch)
    for t in reversed(range(T)):
        out[:, t] = traj.rewards[:, t] + gamma * tail
        tail = traj.rewards[:, t] - traj.reg_values[:, t] + gamma * tail
    return out


def mc_policy_gradient(mdp: ParamMDP, x: np.ndarray, pi: PolicyLike, cfg: MCConfig) -> np.ndarray:
    """Estimate of d V(rho) / d pi(a|s), deterministic given cfg.rng_seed."""
    probs = require_direct(pi, "mc_policy_gradient")
    rng = make_rng(cfg.rng_seed)
    traj = rollout(mdp, x, probs, cfg.traj_len, cfg.batch, rng)
    Q_hat = q_returns(traj, mdp.gamma)
    grad_h = mdp.regularizer.grads(probs) if mdp.tau > 0 else np.zeros_like(probs)

    grad = np.zeros_like(probs)
    w = np.broadcast_to(traj.discounts, traj.states.shape)
    # score term: 1{a_t = a} / pi(a|s_t) * Q_hat_t
    score = w * Q_hat / probs[traj.states, traj.actions]
    np.add.at(grad, (traj.states, traj.actions), score)
    # regularizer term: - tau grad h(pi(s_t)) on every action of the visited state
    visits = np.zeros(mdp.n_states)
    np.add.at(visits, traj.states, w)
    grad -= mdp.tau * visits[:, None] * grad_h
    return grad / cfg.batch



def mc_q_table(mdp: ParamMDP, x: np.ndarray, pi: PolicyLike, cfg: MCConfig) -> np.ndarray:
    """Estimate of the regularized Q^pi(s, a): cfg.batch truncated rollouts started from every (s, a).

    Costs n_states * n_actions estimator batches of env steps.
    """
    probs = require_direct(pi, "mc_q_table")
    rng = make_rng(cfg.rng_seed, stream=2)
    n_s, n_a = probs.shape
    s0 = np.repeat(np.arange(n_s), n_a * cfg.batch)
    a0 = np.tile(np.repeat(np.arange(n_a), cfg.batch), n_s)
    traj = _rollout_from(mdp, x, probs, s0, a0, cfg.traj_len, rng)
    first = q_returns(traj, mdp.gamma)[:, 0]
    return first.reshape(n_s, n_a, cfg.batch).mean(axis=2)


def mc_visitation(
    mdp: ParamMDP,
    x: np.ndarray,
    pi: PolicyLike,
    n_rollouts: int,
    rng: np.random.Generator,
    start: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Empirical discounted visitation from geometric-horizon rollouts (s_H with H ~ Geom(1 - gamma))."""
    probs = require_direct(pi, "mc_visitation")
    rho = mdp.initial_dist if start is None else np.asarray(start, dtype=float)
    P = mdp.transition(x)
    horizon = rng.geometric(1.0 - mdp.gamma, size=n_rollouts) - 1
    s = sample_rows(rng, np.broadcast_to(rho, (n_rollouts, mdp.n_states)))
    for t in range(int(horizon.max(initial=0))):
        live = np.flatnonzero(horizon > t)
        a = sample_rows(rng, probs[s[live]])
        s[live] = sample_rows(rng, P[s[live], a])
    return np.bincount(s, minlength=mdp.n_states) / n_rollouts
