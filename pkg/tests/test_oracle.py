import logging

import numpy as np
import pytest

from conftest import make_mdp, random_policy
from pbrl.errors import ConfigError, UnsupportedStructureError, ValidationError
from pbrl.mdp_core import ParamMDP, expected_value, policy_gradient_exact
from pbrl.oracle import (
    GapKind,
    OracleCertificate,
    OracleConfig,
    brute_force_optimal,
    dominance_gap,
    improvement_gap,
    pmd_solve,
    projected_pg_solve,
    soft_value_iteration,
    solve_lower_level,
    tight_solve,
    value_gap_bound,
)
from pbrl.policy import Policy, Regularizer


def test_pmd_agrees_with_soft_value_iteration():
    for seed in range(3):
        mdp = make_mdp(seed)
        pmd = pmd_solve(mdp, np.zeros(0), OracleConfig(method="pmd", eta=1000.0, T=2000, tol=1e-12))
        svi = soft_value_iteration(mdp, np.zeros(0), tol=1e-12)
        np.testing.assert_allclose(pmd.policy_hat.probs, svi.policy_hat.probs, atol=1e-6)
        assert pmd.gap_kind == GapKind.POLICY


def test_projected_gradient_reaches_brute_force_value():
    for seed in range(3):
        mdp = make_mdp(seed, tau=0.0)
        brute = brute_force_optimal(mdp, np.zeros(0))
        ppg = projected_pg_solve(mdp, np.zeros(0), OracleConfig(method="ppg", eta=100.0, T=5000))
        best = expected_value(mdp, np.zeros(0), brute.policy_hat)
        assert expected_value(mdp, np.zeros(0), ppg.policy_hat) == pytest.approx(best, abs=1e-6)


def test_brute_force_policy_is_deterministic_and_optimal(rng):
    mdp = make_mdp(5, n_states=3, n_actions=2, tau=0.0)
    cert = brute_force_optimal(mdp, np.zeros(0))
    probs = cert.policy_hat.probs
    assert set(np.unique(probs)) <= {0.0, 1.0}
    assert cert.gap_bound == 0.0 and cert.iterations_used == 1
    best = expected_value(mdp, np.zeros(0), probs)
    for _ in range(20):
        assert expected_value(mdp, np.zeros(0), random_policy(rng, 3, 2)) <= best + 1e-12


def test_unsupported_structures():
    with pytest.raises(UnsupportedStructureError):
        pmd_solve(make_mdp(0, tau=0.0), np.zeros(0))
    with pytest.raises(UnsupportedStructureError):
        brute_force_optimal(make_mdp(0), np.zeros(0))
    with pytest.raises(UnsupportedStructureError):
        brute_force_optimal(make_mdp(0, n_states=21, n_actions=2, tau=0.0), np.zeros(0))
    P = np.full((2, 2, 2), 0.5)
    l2 = ParamMDP.tabular(np.eye(2), P, 0.9, tau=0.1, regularizer=Regularizer.squared_l2())
    with pytest.raises(UnsupportedStructureError):
        soft_value_iteration(l2, np.zeros(0))


def test_soft_value_iteration_certificate_bounds_the_value_gap():
    for seed in range(3):
        mdp = make_mdp(seed)
        loose = soft_value_iteration(mdp, np.zeros(0), tol=1e-3)
        reference = soft_value_iteration(mdp, np.zeros(0), tol=1e-13)
        gap = expected_value(mdp, np.zeros(0), reference.policy_hat) - expected_value(mdp, np.zeros(0), loose.policy_hat)
        assert loose.gap_kind == GapKind.VALUE
        assert gap <= loose.gap_bound + 1e-10


@pytest.mark.parametrize("tau", [0.0, 0.05])
def test_value_gap_bound_is_valid_for_any_policy(rng, tau):
    mdp = make_mdp(3, tau=tau)
    best = expected_value(mdp, np.zeros(0), tight_solve(mdp, np.zeros(0)).policy_hat)
    for _ in range(10):
        pi = random_policy(rng, 4, 3)
        cert = OracleCertificate(Policy.direct(pi), 1.0, GapKind.POLICY, 1)
        gap = best - expected_value(mdp, np.zeros(0), pi)
        assert gap <= value_gap_bound(cert, mdp, np.zeros(0)) + 1e-9


def test_improvement_gap_vanishes_at_the_optimum():
    mdp = make_mdp(1)
    cert = soft_value_iteration(mdp, np.zeros(0), tol=1e-13)
    assert improvement_gap(mdp, np.zeros(0), cert.policy_hat).max() < 1e-8


def test_gradient_dominance_bound_at_zero_regularization(rng):
    mdp = make_mdp(2, tau=0.0)
    best = expected_value(mdp, np.zeros(0), brute_force_optimal(mdp, np.zeros(0)).policy_hat)
    for _ in range(10):
        pi = random_policy(rng, 4, 3)
        bound = dominance_gap(policy_gradient_exact(mdp, np.zeros(0), pi), pi) / (
            (1.0 - mdp.gamma) * mdp.initial_dist.min()
        )
        assert best - expected_value(mdp, np.zeros(0), pi) <= bound + 1e-9


def test_dominance_gap_by_hand():
    assert dominance_gap(np.array([[1.0, 2.0]]), np.array([[0.5, 0.5]])) == pytest.approx(0.5)
    assert dominance_gap(np.array([[1.0, 2.0]]), np.array([[0.0, 1.0]])) == pytest.approx(0.0)


def test_auto_dispatch():
    regularized = solve_lower_level(make_mdp(0), np.zeros(0), OracleConfig(T=50))
    assert regularized.gap_kind == GapKind.POLICY
    small = solve_lower_level(make_mdp(0, tau=0.0), np.zeros(0), OracleConfig())
    assert small.gap_bound == 0.0 and small.iterations_used == 1
    large = solve_lower_level(make_mdp(0, n_states=13, n_actions=2, tau=0.0), np.zeros(0), OracleConfig(T=5))
    assert large.gap_kind == GapKind.VALUE and np.isnan(large.contraction)


def test_warm_start_from_the_optimum_stops_early():
    mdp = make_mdp(4)
    cfg = OracleConfig(method="pmd", eta=1.0, T=500)
    cold = pmd_solve(mdp, np.zeros(0), cfg)
    optimum = soft_value_iteration(mdp, np.zeros(0), tol=1e-13).policy_hat
    warm = pmd_solve(mdp, np.zeros(0), cfg, warm_start=optimum)
    assert warm.iterations_used < cold.iterations_used


def test_certificate_and_config_validation():
    with pytest.raises(ValidationError):
        OracleCertificate(Policy.uniform(1, 2), -1.0, GapKind.VALUE, 1)
    with pytest.raises(ConfigError):
        OracleConfig(method="newton")
    with pytest.raises(ConfigError):
        OracleConfig(eta=0.0)
    with pytest.raises(ConfigError):
        OracleConfig(T=0)


def test_two_action_brute_force_by_hand():
    mdp = ParamMDP.tabular(np.array([[1.0, 2.0]]), np.ones((1, 2, 1)), 0.5)
    cert = brute_force_optimal(mdp, np.zeros(0))
    np.testing.assert_array_equal(cert.policy_hat.probs, [[0.0, 1.0]])
    assert expected_value(mdp, np.zeros(0), cert.policy_hat) == pytest.approx(4.0)


def test_pmd_fixed_point_is_unique(rng):
    mdp = make_mdp(6)
    cfg = OracleConfig(method="pmd", eta=10.0, T=5000, tol=1e-13)
    policies = [pmd_solve(mdp, np.zeros(0), cfg, warm_start=random_policy(rng, 4, 3)).policy_hat.probs for _ in range(10)]
    for probs in policies[1:]:
        np.testing.assert_allclose(probs, policies[0], atol=1e-5)


def test_small_projected_gradient_steps_never_lower_the_value(rng):
    mdp = make_mdp(7, tau=0.0)
    cfg = OracleConfig(method="ppg", eta=0.01 * (1.0 - mdp.gamma) ** 3, T=1)
    pi = random_policy(rng, 4, 3)
    values = [expected_value(mdp, np.zeros(0), pi)]
    for _ in range(50):
        pi = projected_pg_solve(mdp, np.zeros(0), cfg, warm_start=pi).policy_hat.probs
        values.append(expected_value(mdp, np.zeros(0), pi))
    assert np.all(np.diff(values) >= -1e-12)
    assert values[-1] > values[0]


def test_converged_soft_value_iteration_logs_no_contraction_warnings(caplog):
    with caplog.at_level(logging.WARNING, logger="pbrl.oracle"):
        for seed in range(3):
            soft_value_iteration(make_mdp(seed), np.zeros(0), tol=1e-12)
    assert not [r for r in caplog.records if "exceeds gamma" in r.getMessage()]
