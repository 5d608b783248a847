import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otode.dual import (DualState, GenericObjective, evaluate, gradient, hessian,
                        mixed_eps_gradient, phi_value, primal_value, recover_primal,
                        relative_entropy, transport_cost)
from otode.errors import ObjectiveOverflowError
from otode.families import make_geodesic, make_two_marginal
from otode.problem import CostPath, DiscreteMarginal, ProblemSpec
from otode.sinkhorn import SinkhornConfig, sinkhorn_solve

from conftest import random_two


def _args(p, phi, eps):
    return p.system, p.cost, p.eta, DualState(np.asarray(phi, float), eps)


def single_point(eta=1.0):
    return ProblemSpec([DiscreteMarginal([0.0])], CostPath.scaled(np.zeros(1)), eta)


# -- hand cases ---------------------------------------------------------------------

@pytest.mark.parametrize("t", [-1.3, 0.0, 0.4])
def test_single_point_problem(t):
    p = single_point()
    assert p.system.e == 1
    a = _args(p, [t], 0.0)
    assert phi_value(*a) == pytest.approx(-t + np.exp(t), abs=1e-15)
    assert gradient(*a)[0] == pytest.approx(-1 + np.exp(t), abs=1e-15)
    assert hessian(*a)[0, 0] == pytest.approx(np.exp(t), abs=1e-15)
    p2 = single_point(eta=0.25)
    assert hessian(*_args(p2, [t], 0.0))[0, 0] == pytest.approx(np.exp(t / 0.25) / 0.25)


def test_product_start(rng):
    p = random_two(rng, 3, 4, eta=0.3)
    a = _args(p, np.zeros(p.system.e), 0.0)
    assert phi_value(*a) == pytest.approx(0.3, abs=1e-15)
    np.testing.assert_allclose(gradient(*a), 0.0, atol=1e-15)
    mu, nu = (m.weights for m in p.marginals)
    np.testing.assert_allclose(recover_primal(*a), np.outer(mu, nu).ravel(), rtol=1e-15)


def test_uniform_two_by_two_hessian():
    m = DiscreteMarginal.uniform(0, 1, 2)
    p = make_two_marginal(m, m, np.zeros((2, 2)), 1.0)
    H = hessian(*_args(p, np.zeros(3), 0.0))
    A = p.system.A  # 4×3: both x indicators and the first y indicator
    expected = np.array([[0.5, 0.0, 0.25], [0.0, 0.5, 0.25], [0.25, 0.25, 0.5]])
    np.testing.assert_allclose(A.T @ np.diag(np.full(4, 0.25)) @ A, expected)
    np.testing.assert_allclose(H, expected, atol=1e-15)


def test_constant_cost_mixed_derivative(rng):
    k = 1.7
    mu = DiscreteMarginal([0, 1, 2], [0.2, 0.3, 0.5])
    nu = DiscreteMarginal([0, 1], [0.6, 0.4])
    p = make_two_marginal(mu, nu, np.full((3, 2), k), 0.4)
    g = mixed_eps_gradient(*_args(p, np.zeros(p.system.e), 0.0))
    np.testing.assert_allclose(g, -(k / 0.4) * p.system.b, rtol=1e-14)


# -- independent oracles ---------------------------------------------------------------

def _naive(p, phi, eps):
    """Φ and γ by explicit loops over the grid."""
    A, b, eta = p.system.A, p.system.b, p.eta
    c = p.cost.value(eps)
    mu, nu = (m.weights for m in p.marginals)
    total, gam = 0.0, np.zeros(A.shape[0])
    for i in range(mu.size):
        for j in range(nu.size):
            l = i * nu.size + j
            s = sum(A[l, k] * phi[k] for k in range(A.shape[1]))
            gam[l] = np.exp((s - c[l]) / eta) * mu[i] * nu[j]
            total += gam[l]
    return -sum(b[k] * phi[k] for k in range(b.size)) + eta * total, gam


def test_value_and_coupling_match_naive_loops(rng):
    for _ in range(5):
        p = random_two(rng, 3, 3, eta=rng.choice([0.1, 0.5, 1.0]))
        phi = rng.normal(scale=0.3, size=p.system.e)
        eps = rng.uniform(0, 1)
        val, gam = _naive(p, phi, eps)
        a = _args(p, phi, eps)
        assert phi_value(*a) == pytest.approx(val, rel=1e-12)
        np.testing.assert_allclose(recover_primal(*a), gam, rtol=1e-12)


def _fd_grad(f, x, h):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h * (1 + abs(x[k]))
        g[k] = (f(x + e) - f(x - e)) / (2 * e[k])
    return g


def test_gradient_hessian_mixed_finite_differences(rng):
    for _ in range(5):
        p = random_two(rng, 4, 3, eta=0.5)
        phi = rng.normal(scale=0.5, size=p.system.e)
        eps = 0.6
        f = lambda x: phi_value(*_args(p, x, eps))
        g = gradient(*_args(p, phi, eps))
        np.testing.assert_allclose(g, _fd_grad(f, phi, 1e-6), rtol=1e-6, atol=1e-9)
        H = hessian(*_args(p, phi, eps))
        Hfd = np.array([_fd_grad(lambda x: gradient(*_args(p, x, eps))[k], phi, 1e-6)
                        for k in range(phi.size)])
        np.testing.assert_allclose(H, Hfd, rtol=1e-5, atol=1e-8)
        assert np.linalg.eigvalsh(H).min() > 0
        h = 1e-5
        mfd = (gradient(*_args(p, phi, eps + h)) - gradient(*_args(p, phi, eps - h))) / (2 * h)
        np.testing.assert_allclose(mixed_eps_gradient(*_args(p, phi, eps)), mfd,
                                   rtol=1e-6, atol=1e-9)


def test_geodesic_mixed_uses_slope(rng):
    z = np.linspace(-1, 1, 5)
    p = make_geodesic(DiscreteMarginal([-0.5, 0.0, 0.4]), DiscreteMarginal([0.2, 0.7]), z, 0.3)
    obj = GenericObjective(p)
    x = rng.normal(scale=0.3, size=obj.dim)
    for eps in (0.2, 0.8):
        h = 1e-5
        fd = (obj.gradient(x, eps + h) - obj.gradient(x, eps - h)) / (2 * h)
        np.testing.assert_allclose(obj.mixed(x, eps), fd, rtol=1e-6, atol=1e-9)
        fd1 = (obj.value(x, eps + h) - obj.value(x, eps - h)) / (2 * h)
        assert obj.eps_derivative(x, eps) == pytest.approx(fd1, rel=1e-7)


# -- stabilization -------------------------------------------------------------------

def test_log_domain_value_and_overflow():
    p = single_point(eta=1.0)
    v = phi_value(*_args(p, [400.0], 0.0))  # exponent beyond the switch
    assert v == pytest.approx(np.exp(400.0) - 400.0, rel=1e-12)
    c = evaluate(*_args(p, [400.0], 0.0))
    assert c.max_exponent == 400.0
    with pytest.raises(ObjectiveOverflowError, match="objective overflow at ε="):
        phi_value(*_args(p, [800.0], 0.0))
    with pytest.raises(ObjectiveOverflowError):
        gradient(*_args(p, [800.0], 0.0))


def test_dimension_check(rng):
    p = random_two(rng)
    with pytest.raises(ValueError):
        phi_value(*_args(p, np.zeros(p.system.e + 1), 0.0))


# -- gauge and duality -----------------------------------------------------------------

def test_reduced_equals_unreduced_at_embedding(rng):
    p = random_two(rng, 3, 4)
    phi = rng.normal(size=p.system.e)
    full = np.zeros(p.full_system.e)
    full[p.system.kept] = phi
    a = phi_value(*_args(p, phi, 0.4))
    b = phi_value(p.full_system, p.cost, p.eta, DualState(full, 0.4))
    assert a == b


def test_duality_offset_at_minimizer(rng):
    for _ in range(4):
        p = random_two(rng, 4, 5, eta=rng.choice([0.1, 0.5]))
        eps = rng.uniform(0.2, 1.0)
        res = sinkhorn_solve(p, eps, SinkhornConfig(tol=1e-13))
        obj = GenericObjective(p)
        x = obj.from_blocks(res.blocks)
        gam = obj.coupling(x, eps).ravel()
        P = primal_value(p.cost, p.eta, eps, gam, p.log_ref)
        assert p.eta - obj.value(x, eps) == pytest.approx(P, rel=1e-8)


def test_entropy_helpers():
    lr = np.log([0.25, 0.25, 0.25, 0.25])
    assert relative_entropy([0.25] * 4, lr) == pytest.approx(0.0, abs=1e-16)
    assert relative_entropy([0.5, 0.0, 0.5, 0.0], lr) == pytest.approx(np.log(2))
    cost = CostPath(np.ones(4), np.arange(4.0))
    assert transport_cost(cost, 0.5, [0.25] * 4) == pytest.approx(1 + 0.5 * 1.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0), st.floats(0.0, 1.0))
def test_hessian_is_spd_and_gradient_is_moment(seed, eta, eps):
    rng = np.random.default_rng(seed)
    p = random_two(rng, 3, 4, eta=eta)
    phi = rng.normal(scale=0.3, size=p.system.e)
    a = _args(p, phi, eps)
    H = hessian(*a)
    np.testing.assert_allclose(H, H.T, atol=0)
    assert np.linalg.eigvalsh(H).min() > 0
    gam = recover_primal(*a)
    np.testing.assert_allclose(gradient(*a), p.system.A.T @ gam - p.system.b, atol=1e-14)
