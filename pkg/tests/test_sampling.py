import numpy as np
import pytest

from conftest import make_mdp, random_policy
from pbrl.errors import ContractViolationError, ValidationError
from pbrl.mdp_core import ParamMDP, evaluate_q_exact, policy_gradient_exact, visitation_distribution
from pbrl.policy import Policy
from pbrl.sampling import (
    MCConfig,
    Trajectory,
    make_rng,
    mc_policy_gradient,
    mc_q_table,
    mc_visitation,
    q_returns,
    rollout,
    sample_rows,
)


def test_make_rng_streams_are_reproducible():
    a = make_rng(7, stream=1).random(5)
    b = make_rng(7, stream=1).random(5)
    c = make_rng(7, stream=2).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_rollout_shapes_and_support(rng):
    mdp = make_mdp(0)
    pi = random_policy(rng, 4, 3)
    traj = rollout(mdp, np.zeros(0), pi, traj_len=6, batch=10, rng=make_rng(0))
    assert traj.states.shape == (10, 6)
    assert traj.length == 6 and traj.batch == 10
    assert traj.states.min() >= 0 and traj.states.max() < 4
    assert traj.actions.max() < 3
    np.testing.assert_allclose(traj.discounts, 0.9 ** np.arange(6))
    np.testing.assert_allclose(traj.rewards, mdp.reward(np.zeros(0))[traj.states, traj.actions])


def test_q_returns_by_hand():
    ones = np.ones((1, 3))
    traj = Trajectory(
        states=np.zeros((1, 3), dtype=int),
        actions=np.zeros((1, 3), dtype=int),
        rewards=ones,
        reg_values=np.zeros((1, 3)),
        discounts=0.5 ** np.arange(3),
    )
    np.testing.assert_allclose(q_returns(traj, 0.5), [[1.75, 1.5, 1.0]])


def test_q_returns_subtract_regularizer_after_first_step():
    traj = Trajectory(
        states=np.zeros((1, 2), dtype=int),
        actions=np.zeros((1, 2), dtype=int),
        rewards=np.ones((1, 2)),
        reg_values=np.full((1, 2), 0.25),
        discounts=0.5 ** np.arange(2),
    )
    np.testing.assert_allclose(q_returns(traj, 0.5), [[1.0 + 0.5 * 0.75, 1.0]])


def test_mc_gradient_is_deterministic_per_seed(rng):
    mdp = make_mdp(1)
    pi = random_policy(rng, 4, 3)
    cfg = MCConfig(traj_len=5, batch=16, rng_seed=3)
    np.testing.assert_array_equal(
        mc_policy_gradient(mdp, np.zeros(0), pi, cfg), mc_policy_gradient(mdp, np.zeros(0), pi, cfg)
    )


def test_mc_gradient_is_close_to_exact(rng):
    mdp = make_mdp(2, n_states=2, n_actions=2, gamma=0.5, tau=0.05)
    pi = np.array([[0.4, 0.6], [0.55, 0.45]])
    estimate = mc_policy_gradient(mdp, np.zeros(0), pi, MCConfig(traj_len=40, batch=40000, rng_seed=11))
    np.testing.assert_allclose(estimate, policy_gradient_exact(mdp, np.zeros(0), pi), atol=0.1)


def test_mc_visitation_is_close_to_exact(rng):
    mdp = make_mdp(4, gamma=0.7)
    pi = random_policy(rng, 4, 3)
    estimate = mc_visitation(mdp, np.zeros(0), pi, 50000, make_rng(5))
    assert estimate.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(estimate, visitation_distribution(mdp, np.zeros(0), pi), atol=0.02)


def test_mc_config_and_parameterization_errors(rng):
    with pytest.raises(ValidationError):
        MCConfig(traj_len=0)
    with pytest.raises(ValidationError):
        MCConfig(batch=0)
    assert MCConfig(traj_len=5, batch=16).env_steps == 80
    mdp = make_mdp(0)
    with pytest.raises(ContractViolationError):
        mc_policy_gradient(mdp, np.zeros(0), Policy.softmax(np.zeros((4, 3))), MCConfig())


def test_myopic_mc_gradient_is_exactly_unbiased():
    # gamma = 0: the estimate depends only on the first action, whatever traj_len is
    mdp = ParamMDP.tabular(np.array([[1.0, 3.0]]), np.ones((1, 2, 1)), 0.0, tau=0.1)
    pi = np.array([[0.3, 0.7]])
    by_action = {}
    seed = 0
    while len(by_action) < 2:
        cfg = MCConfig(traj_len=3, batch=1, rng_seed=seed)
        first = int(rollout(mdp, np.zeros(0), pi, 3, 1, make_rng(seed)).actions[0, 0])
        by_action.setdefault(first, mc_policy_gradient(mdp, np.zeros(0), pi, cfg))
        seed += 1
    mean = sum(pi[0, a] * grad for a, grad in by_action.items())
    np.testing.assert_allclose(mean, policy_gradient_exact(mdp, np.zeros(0), pi), atol=1e-12)


def test_mc_q_table_is_close_to_exact(rng):
    mdp = make_mdp(3, n_states=3, n_actions=2, gamma=0.5)
    pi = random_policy(rng, 3, 2)
    estimate = mc_q_table(mdp, np.zeros(0), pi, MCConfig(traj_len=40, batch=20000, rng_seed=4))
    np.testing.assert_allclose(estimate, evaluate_q_exact(mdp, np.zeros(0), pi), atol=0.05)
    myopic = make_mdp(3, n_states=3, n_actions=2, gamma=0.0)
    exact = mc_q_table(myopic, np.zeros(0), pi, MCConfig(traj_len=2, batch=3, rng_seed=4))
    np.testing.assert_allclose(exact, myopic.reward(np.zeros(0)), atol=1e-12)


def test_draws_past_a_short_row_total_skip_zero_mass_actions():
    rng = make_rng(0)
    np.testing.assert_array_equal(sample_rows(rng, np.tile([0.3, 0.0], (500, 1))), 0)
    np.testing.assert_array_equal(sample_rows(rng, np.tile([0.0, 0.3, 0.0], (500, 1))), 1)
