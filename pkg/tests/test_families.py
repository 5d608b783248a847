import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otode.errors import ConvexOrderError, ConvexOrderUnsupported, InvalidWeightPathError
from otode.families import (LinearWeightPath, check_convex_order, make_barycenter, make_geodesic,
                            make_martingale, make_multi_period, table_problem, z_marginal)
from otode.ode import integrate
from otode.problem import DiscreteMarginal


def gaussian(grid, m, s):
    w = np.exp(-0.5 * ((grid - m) / s) ** 2)
    return DiscreteMarginal(grid, w / w.sum())


# -- convex order -------------------------------------------------------------------

def test_convex_order_examples():
    assert check_convex_order(DiscreteMarginal([0.0]), DiscreteMarginal([-1.0, 1.0]))
    assert not check_convex_order(DiscreteMarginal([-1.0, 1.0]), DiscreteMarginal([0.0]))
    assert not check_convex_order(DiscreteMarginal([0.0]), DiscreteMarginal([0.5, 1.0]))
    mu = DiscreteMarginal([-1.0, 0.0, 1.0])
    assert check_convex_order(mu, mu)


@pytest.mark.parametrize("name", ["table4", "table5"])
def test_bundled_grids_in_convex_order(name):
    p = table_problem(name)
    ms = p.marginals
    for a, b in zip(ms[:-1], ms[1:]):
        assert check_convex_order(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_mean_preserving_spread_is_in_order(n, seed):
    # split every atom of μ symmetrically: the result dominates μ
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    w = rng.uniform(0.1, 1, n)
    w /= w.sum()
    d = rng.uniform(0.01, 1, n)
    nu = DiscreteMarginal(np.concatenate([x - d, x + d]), np.concatenate([w, w]) / 2)
    assert check_convex_order(DiscreteMarginal(x, w), nu)


def test_martingale_constructors_reject_bad_order():
    with pytest.raises(ConvexOrderError, match="not dominated in convex order"):
        make_martingale([-1.0, 1.0], [0.0], np.zeros((2, 1)), 0.1)
    with pytest.raises(ConvexOrderError, match="pair 1"):
        make_multi_period([0.0], [-1.0, 1.0], [0.0], np.zeros((1, 2, 1)), 0.1)
    make_martingale([-1.0, 1.0], [0.0], np.zeros((2, 1)), 0.1, check=False)


def test_convex_order_two_dimensional():
    mu = DiscreteMarginal([[0.0, 0.0], [0.2, 0.0]])
    nu = DiscreteMarginal([[-1, 0], [1, 0], [0, -1], [0, 1], [0.5, 0.0]],
                          [0.2, 0.2, 0.2, 0.2, 0.2])
    with pytest.raises(ConvexOrderUnsupported, match="unsupported in d>1"):
        check_convex_order(mu, nu)
    with pytest.warns(RuntimeWarning, match="unsupported"):
        p = make_martingale(mu, nu, np.arange(10.0).reshape(2, 5) / 10, 0.2)
    assert p.family == "custom" and len(p.basis.groups) == 2
    gam = integrate(p, 10, snapshots=1, polish_every=10).final.coupling
    np.testing.assert_allclose(gam.sum(axis=1), mu.weights, atol=1e-10)
    np.testing.assert_allclose(gam.sum(axis=0), nu.weights, atol=1e-10)
    np.testing.assert_allclose(gam @ nu.points, mu.points * mu.weights[:, None], atol=1e-10)


def test_degenerate_middle_marginal_reduces_to_full_rank():
    mu = DiscreteMarginal([-0.2, 0.0, 0.2])
    nu = DiscreteMarginal(np.linspace(-1, 1, 5))
    p = make_multi_period(mu, mu, nu, np.zeros((3, 3, 5)), 0.1)
    sys = p.system
    assert np.linalg.matrix_rank(sys.A) == sys.e
    assert sys.e < p.full_system.e


# -- geodesic and barycenter --------------------------------------------------------

GRID_X = np.linspace(-1, 1, 15)
GRID_Z = np.linspace(-1, 1, 25)


def _z_path(p, steps=20, snaps=5):
    curve = integrate(p, steps, snapshots=snaps, polish_every=steps)
    return [(s.eps, z_marginal(p, s.coupling)) for _, s in curve.snapshots()]


def test_geodesic_symmetry():
    a, b = gaussian(GRID_X, -0.4, 0.15), gaussian(GRID_X, 0.4, 0.2)
    fwd = _z_path(make_geodesic(a, b, GRID_Z, 0.01))
    bwd = _z_path(make_geodesic(b, a, GRID_Z, 0.01))
    for (e, zf), (_, zb) in zip(fwd, reversed(bwd)):
        assert 0.5 * np.abs(zf - zb).sum() <= 1e-4, e


def test_geodesic_mean_interpolates():
    a, b = gaussian(GRID_X, -0.4, 0.15), gaussian(GRID_X, 0.4, 0.2)
    for e, z in _z_path(make_geodesic(a, b, GRID_Z, 0.01)):
        assert z @ GRID_Z == pytest.approx(-0.4 + 0.8 * e, abs=0.02)
        assert z.sum() == pytest.approx(1.0, abs=1e-3)
    # one terminal Newton step squares the mass error
    assert z.sum() == pytest.approx(1.0, abs=1e-7)


def test_geodesic_identical_endpoints_is_reversible():
    # with equal endpoints, swapping them maps ε to 1 − ε
    a = gaussian(GRID_X, 0.1, 0.2)
    path = _z_path(make_geodesic(a, a, GRID_Z, 0.01))
    for (_, z), (_, zr) in zip(path, reversed(path)):
        assert 0.5 * np.abs(z - zr).sum() <= 1e-4
    assert path[2][1] @ GRID_Z == pytest.approx(a.mean()[0], abs=1e-3)
    # and it only moves by entropic blur in between
    for _, z in path:
        assert 0.5 * np.abs(z - path[0][1]).sum() <= 0.05


def test_barycenter_frozen_vertex_and_symmetry():
    ms = [gaussian(GRID_X, m, 0.15) for m in (-0.5, 0.0, 0.5)]
    p = make_barycenter(ms, GRID_Z, eta=0.01)
    path = _z_path(p)
    # at ε = 0 all weight sits on the first marginal: z looks like a blurred copy of it
    assert path[0][1] @ GRID_Z == pytest.approx(-0.5, abs=0.02)
    assert path[-1][1] @ GRID_Z == pytest.approx(0.25, abs=0.02)
    lam = p.meta["lambda_path"]
    np.testing.assert_allclose(lam(1.0), [0, 0.5, 0.5])


def test_barycenter_of_identical_measures():
    a = gaussian(GRID_X, 0.2, 0.2)
    p = make_barycenter([a, a], GRID_Z, eta=0.01)
    path = _z_path(p)
    for (_, z), (_, zr) in zip(path, reversed(path)):
        assert 0.5 * np.abs(z - zr).sum() <= 1e-4
        assert 0.5 * np.abs(z - path[0][1]).sum() <= 0.05


class _Frozen:
    def __call__(self, eps):
        return np.array([1.0, 0.0, 0.0])

    def derivative(self, eps):
        return np.zeros(3)


def test_barycenter_weights_frozen_at_a_vertex():
    ms = [gaussian(GRID_X, m, 0.15) for m in (-0.5, 0.0, 0.5)]
    p = make_barycenter(ms, GRID_Z, lambda_path=_Frozen(), eta=0.01)
    target = gaussian(GRID_Z, -0.5, 0.15).weights
    for _, z in _z_path(p):
        assert 0.5 * np.abs(z - target).sum() <= 0.05


class _BadPath:
    def __call__(self, eps):
        return np.array([1.0 - 2 * eps, 2 * eps])

    def derivative(self, eps):
        return np.array([-2.0, 2.0])


def test_weight_path_validation():
    ms = [DiscreteMarginal([0.0, 1.0])] * 2
    with pytest.raises(InvalidWeightPathError, match="invalid weight path"):
        make_barycenter(ms, GRID_Z, lambda_path=_BadPath())
    with pytest.raises(ValueError, match="derivative"):
        make_barycenter(ms, GRID_Z, lambda_path=lambda e: np.array([1 - e, e]))
    with pytest.raises(ValueError):
        LinearWeightPath(1)
    centered = LinearWeightPath(2)
    with pytest.raises(InvalidWeightPathError, match="λ\\(0\\)"):
        make_barycenter(ms, GRID_Z, lambda_path=type("P", (), {
            "__call__": lambda self, e: np.array([0.5, 0.5]),
            "derivative": lambda self, e: np.zeros(2)})())
    assert centered.affine


def test_nonaffine_weight_path():
    class Smooth:
        def __call__(self, e):
            s = np.sin(0.5 * np.pi * e) ** 2
            return np.array([1 - s, s])

        def derivative(self, e):
            return np.array([-1, 1]) * 0.5 * np.pi * np.sin(np.pi * e)

    ms = [gaussian(GRID_X, -0.3, 0.2), gaussian(GRID_X, 0.3, 0.2)]
    p = make_barycenter(ms, GRID_Z, lambda_path=Smooth(), eta=0.02)
    assert not p.cost.affine
    path = _z_path(p, steps=20, snaps=3)
    assert path[1][1] @ GRID_Z == pytest.approx(0.0, abs=0.02)


@pytest.mark.parametrize("name,shape", [("table1", (100, 100)), ("table2", (100, 100)),
                                        ("table3", (99, 99, 99)), ("table4", (100, 200)),
                                        ("table5", (30, 60, 90))])
def test_table_problem_shapes(name, shape):
    assert table_problem(name).shape == shape


def test_table_problem_unknown():
    with pytest.raises(ValueError, match="unknown"):
        table_problem("table9")


def test_z_marginal_needs_free_axis():
    p = table_problem("table1")
    with pytest.raises(ValueError):
        z_marginal(p, np.zeros(p.shape))
