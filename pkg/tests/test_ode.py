import numpy as np
import pytest

from otode.dual import GenericObjective
from otode.errors import InitialConditionError, ODEStalledError
from otode.families import make_geodesic, make_martingale, make_two_marginal
from otode.ode import (SolveStats, _solve_spd, initial_potential, integrate, make_objective,
                       newton_solve, rhs)
from otode.problem import CostPath, DiscreteMarginal, ProblemSpec
from otode.sinkhorn import SinkhornConfig, sinkhorn_solve

from conftest import FAMILY_MAKERS, random_martingale, random_two

FAMILIES = sorted(FAMILY_MAKERS)


# -- initial condition -------------------------------------------------------------------

def test_unconstrained_start_is_zero(rng):
    p = random_two(rng)
    x0 = initial_potential(p)
    assert np.all(x0 == 0)


def test_martingale_start_satisfies_constraint():
    mu = DiscreteMarginal([-0.5, 0.5])
    nu = DiscreteMarginal([-1.0, -0.25, 0.25, 1.0])
    p = make_martingale(mu, nu, np.zeros((2, 4)), 0.1)
    k = make_objective(p)
    x0 = initial_potential(p, k)
    gam = k.coupling(x0, 0.0)
    resid = (gam * (nu.x[None, :] - mu.x[:, None])).sum(axis=1)
    np.testing.assert_allclose(resid, 0.0, atol=1e-8)
    assert np.abs(k.gradient(x0, 0.0)).max() <= 1e-10


def test_geodesic_closed_form_start():
    x1 = DiscreteMarginal([-0.6, -0.1, 0.3])
    x2 = DiscreteMarginal([0.2, 0.8])
    z = np.linspace(-1, 1, 9)
    eta = 0.05
    p = make_geodesic(x1, x2, z, eta)
    obj = GenericObjective(p)
    x0 = initial_potential(p, obj)
    assert np.abs(obj.gradient(x0, 0.0)).max() <= 1e-10
    blocks = obj.to_blocks(x0)
    # gauge-free comparison: the exponent on the grid
    d = (x1.x[:, None] - z[None, :]) ** 2
    u = -eta * np.log((np.exp(-d / eta) / z.size).sum(axis=1))
    expected = np.broadcast_to(u[:, None, None], p.shape)
    np.testing.assert_allclose(p.exponent(blocks), expected, atol=1e-8)


def test_initial_condition_failure(rng):
    p = random_martingale(rng, eta=0.05)
    with pytest.raises(InitialConditionError, match="initial condition failed"):
        # one sweep is not enough and Newton is not reached: make Newton fail too
        initial_potential(p, config=SinkhornConfig(max_iters=1, tol=1e-300))


# -- right-hand side ----------------------------------------------------------------------

def test_rhs_single_point():
    p = ProblemSpec([DiscreteMarginal([0.0])], CostPath(np.zeros(1), np.array([2.0])), 0.5)
    obj = GenericObjective(p)
    t = 0.3
    H = np.exp(t / 0.5 - 0.2 * 2.0 / 0.5) / 0.5
    g = -2.0 * np.exp(t / 0.5 - 0.2 * 2.0 / 0.5) / 0.5
    assert rhs(obj, np.array([t]), 0.2)[0] == pytest.approx(-g / H, rel=1e-14)
    assert rhs(obj, np.array([t]), 0.2)[0] == pytest.approx(2.0, rel=1e-14)


def test_rhs_matches_dense_solve(rng):
    for _ in range(5):
        p = random_two(rng, 3, 3, eta=0.3)
        obj = GenericObjective(p)
        x, eps = rng.normal(scale=0.3, size=obj.dim), rng.uniform(0, 1)
        ref = -np.linalg.solve(obj.hessian(x, eps), obj.mixed(x, eps))
        np.testing.assert_allclose(rhs(obj, x, eps), ref, rtol=1e-10, atol=1e-12)
        H, g = obj.hessian(x, eps), obj.mixed(x, eps)
        y = -rhs(obj, x, eps)
        assert np.abs(H @ y - g).max() <= 1e-10 * np.abs(g).max()


def test_jitter_then_stall():
    stats = SolveStats()
    # positive semidefinite with a tiny negative eigenvalue: jitter rescues it
    Q = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))[0]
    H = Q @ np.diag([1.0, 1.0, 1.0, -1e-14]) @ Q.T
    _solve_spd(H, np.ones(4), 0.3, stats)
    assert stats.jitter_retries == 1
    with pytest.raises(ODEStalledError, match="ODE stalled at ε=0.3"):
        _solve_spd(-np.eye(3), np.ones(3), 0.3, SolveStats())


# -- integration ------------------------------------------------------------------------

def test_constant_cost_single_step():
    mu = DiscreteMarginal([0, 1, 2], [0.2, 0.3, 0.5])
    nu = DiscreteMarginal([0, 1], [0.6, 0.4])
    p = make_two_marginal(mu, nu, np.full((3, 2), 1.5), 0.2)
    curve = integrate(p, steps=1)
    assert curve.final.grad_inf_norm <= 1e-10
    np.testing.assert_allclose(curve.final.coupling, np.outer(mu.weights, nu.weights), atol=1e-12)
    assert curve.final.primal_value == pytest.approx(1.5, abs=1e-12)


def test_curve_bookkeeping(rng):
    p = random_two(rng, 4, 4, eta=0.3)
    curve = integrate(p, steps=100, snapshots=16)
    eps = curve.epsilons
    assert eps[0] == 0 and np.all(np.diff(eps) > 0) and eps[-1] == pytest.approx(1.0)
    obj = make_objective(p)
    for s in curve.samples:
        assert s.dual_value == pytest.approx(obj.value(s.phi, s.eps), rel=1e-12, abs=1e-15)
    snaps = curve.snapshots()
    assert len(snaps) == 16 and snaps[0][0] == 0 and snaps[-1][0] == 100
    assert curve.stats.factorizations == 400 and curve.stats.jitter_retries == 0
    with pytest.raises(ValueError):
        integrate(p, steps=0)


@pytest.mark.parametrize("maker", [random_two, random_martingale])
def test_rk4_order(maker):
    rng = np.random.default_rng(5)
    p = maker(rng, eta=0.2)
    obj = make_objective(p)
    ref = obj.from_blocks(sinkhorn_solve(p, 1.0, SinkhornConfig(tol=1e-14)).blocks)
    errs = [np.abs(integrate(p, n, record_couplings=False).final.phi - ref).max()
            for n in (8, 16, 32)]
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios >= 10) & (ratios <= 24)), ratios


def test_polish_reduces_drift(rng):
    p = random_martingale(rng, eta=0.1)
    plain = integrate(p, 5, record_couplings=False)
    polished = integrate(p, 5, record_couplings=False, polish_every=1)
    assert polished.stats.polish_steps == 5
    assert polished.final.grad_inf_norm < 1e-3 * plain.final.grad_inf_norm


@pytest.mark.parametrize("family", FAMILIES)
def test_generic_and_reduced_trajectories_agree(rng, family):
    p = FAMILY_MAKERS[family](rng)
    a = integrate(p, 20, snapshots=3)
    b = integrate(p, 20, snapshots=3, generic=True)
    assert b.family == "generic" and a.family == family
    for (_, sa), (_, sb) in zip(a.snapshots(), b.snapshots()):
        assert 0.5 * np.abs(sa.coupling - sb.coupling).sum() <= 1e-5


@pytest.mark.parametrize("family", FAMILIES)
def test_endpoint_matches_sinkhorn(rng, family):
    p = FAMILY_MAKERS[family](rng)
    curve = integrate(p, 25, record_couplings=False)
    res = sinkhorn_solve(p, 1.0, SinkhornConfig(tol=1e-12))
    assert curve.final.dual_value == pytest.approx(res.value, rel=1e-2)
    assert curve.final.dual_value == pytest.approx(res.value, rel=1e-6, abs=1e-8)


def test_newton_solve_converges(rng):
    p = random_martingale(rng, eta=0.2)
    obj = make_objective(p)
    x = newton_solve(obj, np.zeros(obj.dim), 1.0, tol=1e-12)
    assert np.abs(obj.gradient(x, 1.0)).max() <= 1e-12


def test_final_tolerance_refines_endpoint(rng):
    p = random_martingale(rng, eta=0.1)
    plain = integrate(p, 4, snapshots=2)
    tight = integrate(p, 4, snapshots=2, final_tol=1e-13)
    assert plain.final.grad_inf_norm > 1e-8
    assert tight.final.grad_inf_norm <= 1e-13
    assert tight.stats.polish_steps >= 1
    assert tight.final.coupling is not None and len(tight.samples) == 5
    np.testing.assert_array_equal(tight.samples[2].phi, plain.samples[2].phi)


def test_polished_steps_reach_rounding_level():
    # close to the optimum the Armijo decrease is below rounding noise in Φ;
    # the step must still be taken rather than shrunk to nothing
    from otode.cli import demo_geodesic
    p = demo_geodesic()
    curve = integrate(p, 100, record_couplings=False, polish_every=1)
    assert curve.grad_norms.max() <= 1e-13
