import numpy as np
import pytest

from pbrl.applications import StackelbergGame
from pbrl.mdp_core import ConstantMap, IncentiveMap, ParamMDP, TableMap
from pbrl.policy import Regularizer
from pbrl.zerosum import ZeroSumGame


def random_stochastic(rng, shape):
    w = 0.1 + rng.random(shape)
    return w / w.sum(axis=-1, keepdims=True)


def random_policy(rng, n_states, n_actions):
    """Interior policy, every entry at least ~0.1 / n_actions."""
    return random_stochastic(rng, (n_states, n_actions))


def tangent_direction(rng, shape):
    """Random direction whose rows sum to zero (stays on the simplex product)."""
    d = rng.standard_normal(shape)
    return d - d.mean(axis=-1, keepdims=True)


def central_difference(fn, x, eps=1e-6):
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        step = np.zeros(x.size)
        step[i] = eps
        step = step.reshape(x.shape)
        flat[i] = (fn(x + step) - fn(x - step)) / (2.0 * eps)
    return grad


def directional_difference(fn, point, direction, eps=1e-6):
    return (fn(point + eps * direction) - fn(point - eps * direction)) / (2.0 * eps)


def make_mdp(seed, n_states=4, n_actions=3, gamma=0.9, tau=0.05, reward_param=None):
    """Random tabular MDP. reward_param: None, "table" or "incentive"."""
    rng = np.random.default_rng(seed)
    reward = rng.random((n_states, n_actions))
    P = random_stochastic(rng, (n_states, n_actions, n_states))
    rho = random_stochastic(rng, (n_states,))
    reg = Regularizer.entropy() if tau > 0 else Regularizer.none()
    if reward_param == "table":
        rmap = TableMap((n_states, n_actions))
    elif reward_param == "incentive":
        rmap = IncentiveMap(reward, 0.5)
    else:
        rmap = ConstantMap(reward)
    return ParamMDP(n_states, n_actions, gamma, tau, reg, rmap, ConstantMap(P, rmap.dim_x), rho)


def make_stackelberg(seed, n_states=3, n_leader=2, n_follower=3, gamma=0.9, tau=0.05):
    rng = np.random.default_rng(seed)
    shape = (n_states, n_leader, n_follower)
    reg = Regularizer.entropy() if tau > 0 else Regularizer.none()
    return StackelbergGame(
        n_states, n_leader, n_follower, gamma, tau, reg, reg,
        rng.random(shape), rng.random(shape),
        random_stochastic(rng, shape + (n_states,)),
        random_stochastic(rng, (n_states,)),
    )


def make_zero_sum(seed, n_states=3, n_actions1=2, n_actions2=3, gamma=0.8, tau=0.1):
    rng = np.random.default_rng(seed)
    shape = (n_states, n_actions1, n_actions2)
    reg = Regularizer.entropy() if tau > 0 else Regularizer.none()
    return ZeroSumGame(
        n_states, n_actions1, n_actions2, gamma, tau, reg,
        IncentiveMap(rng.random(shape), 0.2),
        random_stochastic(rng, shape + (n_states,)),
        random_stochastic(rng, (n_states,)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
