import itertools

import numpy as np
import pytest

from conftest import central_difference, random_policy
from pbrl.errors import ConfigError, ContractViolationError, ValidationError
from pbrl.policy import (
    Policy,
    Regularizer,
    check_stochastic,
    project_simplex,
    project_simplex_rows,
    regularized_argmin,
    regularizer_value_and_grad,
    require_direct,
    softmax_chain_gradient,
    softmax_jacobian,
    softmax_materialize,
    validate_regularization,
)


def test_projection_known_points():
    np.testing.assert_allclose(project_simplex([0.5, 0.5, 0.5]), np.full(3, 1.0 / 3.0))
    np.testing.assert_allclose(project_simplex([2.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(project_simplex([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5])


def test_projection_is_nearest_point(rng):
    for _ in range(50):
        v = rng.standard_normal(5) * 3.0
        p = project_simplex(v)
        assert p.min() >= 0.0
        assert abs(p.sum() - 1.0) < 1e-12
        # variational inequality of the Euclidean projection
        for _ in range(5):
            q = rng.dirichlet(np.ones(5))
            assert np.dot(v - p, q - p) <= 1e-10


def test_projection_is_idempotent_and_nonexpansive(rng):
    for _ in range(100):
        u, v = rng.standard_normal((2, 5)) * 2.0
        pu, pv = project_simplex(u), project_simplex(v)
        np.testing.assert_allclose(project_simplex(pu), pu, atol=1e-12)
        assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) + 1e-12


def _projection_by_support(v):
    """Enumerate supports; the KKT point has p_i = v_i - theta on the support and v_i <= theta off it."""
    for mask in itertools.product((False, True), repeat=v.size):
        support = np.array(mask)
        if not support.any():
            continue
        theta = (v[support].sum() - 1.0) / support.sum()
        if np.all(v[support] - theta >= 0.0) and np.all(v[~support] - theta <= 0.0):
            return np.where(support, v - theta, 0.0)
    raise AssertionError("no KKT support found")


def test_projection_matches_exhaustive_kkt(rng):
    for _ in range(1000):
        v = rng.standard_normal(5) * 2.0
        np.testing.assert_allclose(project_simplex(v), _projection_by_support(v), atol=1e-10)


def test_projection_rejects_bad_input():
    with pytest.raises(ValidationError):
        project_simplex(np.ones((2, 2)))
    with pytest.raises(ValidationError):
        project_simplex_rows(np.array([[np.nan, 1.0]]))


def test_softmax_chain_matches_finite_differences(rng):
    logits = rng.standard_normal((3, 4))
    g = rng.standard_normal((3, 4))
    numeric = central_difference(lambda z: float(np.sum(g * softmax_materialize(z))), logits)
    np.testing.assert_allclose(softmax_chain_gradient(logits, g), numeric, rtol=1e-6, atol=1e-8)


def test_softmax_ignores_row_shifts(rng):
    logits = rng.standard_normal((4, 3))
    shifted = logits + 10.0 * rng.standard_normal((4, 1))
    np.testing.assert_allclose(softmax_materialize(shifted), softmax_materialize(logits), atol=1e-12)
    np.testing.assert_array_equal(softmax_materialize(shifted).argmax(axis=1), logits.argmax(axis=1))


def test_softmax_jacobian_agrees_with_chain(rng):
    logits = rng.standard_normal((2, 3))
    g = rng.standard_normal((2, 3))
    jac = softmax_jacobian(logits).reshape(6, 6)
    np.testing.assert_allclose(jac.T @ g.ravel(), softmax_chain_gradient(logits, g).ravel(), atol=1e-12)


def test_regularizer_values():
    uniform = np.full((2, 4), 0.25)
    onehot = np.eye(4)[:2]
    np.testing.assert_allclose(Regularizer.entropy().values(uniform), 0.0, atol=1e-12)
    np.testing.assert_allclose(Regularizer.entropy().values(onehot), np.log(4.0))
    np.testing.assert_allclose(Regularizer.kl(np.full(4, 0.25)).values(uniform), 0.0, atol=1e-12)
    np.testing.assert_allclose(Regularizer.squared_l2().values(uniform), 0.5 * 0.25)
    np.testing.assert_allclose(Regularizer.none().values(uniform), 0.0)


@pytest.mark.parametrize("reg", [Regularizer.entropy(), Regularizer.squared_l2(), Regularizer.kl(np.array([0.2, 0.3, 0.5]))])
def test_regularizer_gradients(rng, reg):
    p = random_policy(rng, 1, 3)[0]
    value, grad = regularizer_value_and_grad(reg, p)
    numeric = central_difference(lambda q: float(reg.values(q[None, :])[0]), p)
    np.testing.assert_allclose(grad, numeric, rtol=1e-6, atol=1e-8)
    assert value == pytest.approx(float(reg.values(p[None, :])[0]))


@pytest.mark.parametrize("reg", [Regularizer.entropy(), Regularizer.squared_l2(), Regularizer.kl(np.array([0.2, 0.3, 0.5]))])
def test_regularizer_is_strongly_convex(rng, reg):
    for _ in range(50):
        p, q = random_policy(rng, 2, 3)
        hp, hq = reg.values(p[None, :])[0], reg.values(q[None, :])[0]
        lower = hq + np.dot(reg.grads(q[None, :])[0], p - q) + 0.5 * reg.modulus * np.sum((p - q) ** 2)
        assert hp >= lower - 1e-12


@pytest.mark.parametrize("reg", [Regularizer.entropy(), Regularizer.squared_l2(), Regularizer.kl(np.array([0.1, 0.6, 0.3]))])
def test_regularized_argmin_is_optimal(rng, reg):
    tau = 0.3
    c = rng.standard_normal((4, 3))
    best = regularized_argmin(reg, c, tau)
    check_stochastic(best)

    def objective(p):
        return np.sum(p * c, axis=1) + tau * reg.values(p)

    for _ in range(30):
        other = rng.dirichlet(np.ones(3), size=4)
        assert np.all(objective(best) <= objective(other) + 1e-10)


def test_entropy_argmin_is_softmax(rng):
    c = rng.standard_normal((3, 5))
    np.testing.assert_allclose(regularized_argmin(Regularizer.entropy(), c, 0.5), softmax_materialize(-c / 0.5))


def test_regularization_config_errors():
    with pytest.raises(ConfigError):
        regularized_argmin(Regularizer.entropy(), np.zeros((1, 2)), 0.0)
    with pytest.raises(ConfigError):
        validate_regularization(Regularizer.none(), 0.1)
    with pytest.raises(ConfigError):
        Regularizer.kl(np.array([0.0, 1.0]))
    with pytest.raises(ConfigError):
        validate_regularization(Regularizer.entropy(), -1.0)


def test_policy_parameterizations():
    logits = np.array([[0.0, 1.0], [2.0, -1.0]])
    soft = Policy.softmax(logits)
    np.testing.assert_allclose(soft.probs.sum(axis=1), 1.0)
    with pytest.raises(ContractViolationError):
        require_direct(soft, "test")
    with pytest.raises(ValidationError):
        Policy.direct(np.array([[0.5, 0.6]]))
    uniform = Policy.uniform(2, 4)
    assert uniform.n_states == 2 and uniform.n_actions == 4
    np.testing.assert_allclose(Policy.uniform(2, 4, soft.param_kind).probs, uniform.probs)


def test_check_stochastic_rejects_negative_rows():
    with pytest.raises(ValidationError):
        check_stochastic(np.array([[1.5, -0.5]]))
    with pytest.raises(ValidationError):
        check_stochastic(np.array([[0.5, np.inf]]))
