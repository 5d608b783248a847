"""Constructors for the standard problem families.

All one-dimensional examples use the cost path ε·c (zero base). Geodesic and
barycenter problems add a free coordinate z with a uniform reference and a
cost that moves between squared distances as ε runs over [0, 1].
"""

from __future__ import annotations

import warnings

import numpy as np

from otode.errors import (ConvexOrderError, ConvexOrderUnsupported,
                          InvalidWeightPathError)
from otode.problem import (ConstraintBasis, ConstraintGroup, CostPath,
                           DiscreteMarginal, ProblemSpec)


def _marginal(m):
    return m if isinstance(m, DiscreteMarginal) else DiscreteMarginal(m)


def _table(cost, marginals):
    """Cost as a grid tensor; ``cost`` is an array or a callable of the
    per-axis coordinate arrays (broadcast against each other)."""
    shape = tuple(mu.size for mu in marginals)
    if callable(cost):
        nd = len(marginals)
        coords = []
        for i, mu in enumerate(marginals):
            sh = [1] * nd
            sh[i] = -1
            coords.append(mu.x.reshape(sh))
        c = np.broadcast_to(np.asarray(cost(*coords), dtype=float), shape)
    else:
        c = np.asarray(cost, dtype=float)
        if c.size != np.prod(shape):
            raise ValueError(f"cost table has {c.size} entries, grid has {int(np.prod(shape))}")
        c = c.reshape(shape)
    return np.array(c)


# -- named costs --------------------------------------------------------------

def quadratic(x, y):
    return (y - x) ** 2


def repulsive(x, y):
    return -np.log(0.1 + np.abs(x - y))


def pairwise_repulsive(x, y, z):
    return repulsive(x, y) + repulsive(y, z) + repulsive(x, z)


def spence_mirrlees(x, y):
    return np.exp(-x) * y ** 2


def multi_period_spence_mirrlees(x, y, z):
    return np.exp(-x) * (y ** 2 + z ** 2)


NAMED_COSTS = {
    "quadratic": quadratic,
    "repulsive": repulsive,
    "pairwise_repulsive": pairwise_repulsive,
    "spence_mirrlees": spence_mirrlees,
    "multi_period_spence_mirrlees": multi_period_spence_mirrlees,
}


# -- plain transport ----------------------------------------------------------

def make_two_marginal(mu, nu, cost, eta):
    """Two-marginal problem with cost path ε·c."""
    margs = [_marginal(mu), _marginal(nu)]
    c = _table(cost, margs)
    return ProblemSpec(margs, CostPath.scaled(c), eta, family="two_marginal")


def make_three_marginal(marginals, cost, eta):
    margs = [_marginal(m) for m in marginals]
    if len(margs) != 3:
        raise ValueError("three-marginal family needs exactly three marginals")
    c = _table(cost, margs)
    return ProblemSpec(margs, CostPath.scaled(c), eta, family="three_marginal")


# -- martingale families -------------------------------------------------------

def check_convex_order(mu, nu, mean_tol=1e-10, call_tol=1e-12):
    """Whether μ ⪯_c ν for discrete measures on the line.

    Equal means plus E_μ[(X − k)₊] ≤ E_ν[(Y − k)₊] at every support point k
    of either measure; both call functions are piecewise linear with kinks
    only there, so this is exact.
    """
    mu, nu = _marginal(mu), _marginal(nu)
    if mu.dim != 1 or nu.dim != 1:
        raise ConvexOrderUnsupported()
    if abs(mu.mean()[0] - nu.mean()[0]) > mean_tol:
        return False
    ks = np.union1d(mu.x, nu.x)
    call_mu = (np.maximum(mu.x[None, :] - ks[:, None], 0) * mu.weights).sum(axis=1)
    call_nu = (np.maximum(nu.x[None, :] - ks[:, None], 0) * nu.weights).sum(axis=1)
    return bool(np.all(call_mu <= call_nu + call_tol))


def _require_order(pairs, check):
    if not check:
        return
    for k, (a, b) in enumerate(pairs):
        try:
            ok = check_convex_order(a, b)
        except ConvexOrderUnsupported as exc:
            warnings.warn(str(exc), RuntimeWarning, stacklevel=3)
            continue
        if not ok:
            raise ConvexOrderError(f"pair {k}")


def _increments(a, b, name):
    """One constraint group per coordinate of b − a (shape (|a|, |b|) each)."""
    diff = b.points[None, :, :] - a.points[:, None, :]
    return [diff[:, :, k] for k in range(diff.shape[-1])], [
        name if diff.shape[-1] == 1 else f"{name}{k + 1}" for k in range(diff.shape[-1])]


def make_martingale(mu, nu, cost, eta, check=True):
    """Martingale problem: E[Y | X] = X, one multiplier g_i per x_i.

    In d > 1 dimensions each x_i gets d multipliers and the problem runs on
    the generic objective (family ``"custom"``).
    """
    margs = [_marginal(mu), _marginal(nu)]
    _require_order([(margs[0], margs[1])], check)
    c = _table(cost, margs)
    Ds, labels = _increments(margs[0], margs[1], "g")
    basis = ConstraintBasis(tuple(ConstraintGroup((0,), D, lab) for D, lab in zip(Ds, labels)))
    family = "martingale" if len(Ds) == 1 else "custom"
    return ProblemSpec(margs, CostPath.scaled(c), eta, basis=basis, family=family)


def make_multi_period(mu, theta, nu, cost, eta, check=True):
    """Two-period martingale: E[Y | X] = X and E[Z | X, Y] = Y."""
    margs = [_marginal(mu), _marginal(theta), _marginal(nu)]
    _require_order([(margs[0], margs[1]), (margs[1], margs[2])], check)
    c = _table(cost, margs)
    D1s, l1 = _increments(margs[0], margs[1], "g")
    D2s, l2 = _increments(margs[1], margs[2], "h")
    groups = [ConstraintGroup((0,), D[:, :, None], lab) for D, lab in zip(D1s, l1)]
    groups += [ConstraintGroup((0, 1), D[None, :, :], lab) for D, lab in zip(D2s, l2)]
    family = "multi_period_martingale" if len(D1s) == 1 else "custom"
    return ProblemSpec(margs, CostPath.scaled(c), eta, basis=ConstraintBasis(tuple(groups)),
                       family=family)


# -- interpolation families ------------------------------------------------------

def _sqdist(a, b):
    return ((a.points[:, None, :] - b.points[None, :, :]) ** 2).sum(axis=-1)


def _grid_marginal(grid_z):
    if isinstance(grid_z, DiscreteMarginal):
        return DiscreteMarginal(grid_z.points)  # reference is uniform regardless
    return DiscreteMarginal(grid_z)


def make_geodesic(mu1, mu2, grid_z, eta):
    """Entropic interpolation on axes (x¹, z, x²) with z free.

    c(ε) = (1 − ε)|x¹ − z|² + ε|z − x²|².
    """
    m1, m2 = _marginal(mu1), _marginal(mu2)
    Z = _grid_marginal(grid_z)
    d1 = _sqdist(m1, Z)[:, :, None]
    d2 = _sqdist(Z, m2)[None, :, :]
    shape = (m1.size, Z.size, m2.size)
    base = np.broadcast_to(d1, shape)
    slope = np.broadcast_to(d2, shape) - base
    return ProblemSpec([m1, Z, m2], CostPath(base, slope), eta,
                       free=(False, True, False), family="geodesic",
                       meta={"z_axis": 1})


class LinearWeightPath:
    """λ(ε) = (1 − ε, ε/(n−1), ..., ε/(n−1)), starting at the first vertex."""

    def __init__(self, n):
        if n < 2:
            raise ValueError("a weight path needs at least two marginals")
        self.n = n
        self.affine = True

    def __call__(self, eps):
        return np.concatenate([[1.0 - eps], np.full(self.n - 1, eps / (self.n - 1))])

    def derivative(self, eps):
        return np.concatenate([[-1.0], np.full(self.n - 1, 1.0 / (self.n - 1))])

    def second(self, eps):
        return np.zeros(self.n)


def _check_weight_path(path, n, eps_grid):
    for eps in eps_grid:
        lam = np.asarray(path(eps), dtype=float)
        if lam.shape != (n,) or np.any(lam < -1e-12) or abs(lam.sum() - 1) > 1e-10:
            raise InvalidWeightPathError(float(eps), f"λ = {lam}")
    lam0 = np.asarray(path(0.0), dtype=float)
    if np.sum(np.isclose(lam0, 1.0, atol=1e-12)) != 1:
        raise InvalidWeightPathError(0.0, "λ(0) must put all weight on one marginal")


def make_barycenter(marginals, grid_z, lambda_path=None, eta=0.01, eps_max=1.0, n_check=101):
    """Barycenter path on axes (x¹, ..., xⁿ, z) with z free.

    Parameters
    ----------
    lambda_path : callable, optional
        ε ↦ λ(ε) on the simplex, with a ``derivative`` attribute (callable)
        and optionally ``second``. Defaults to :class:`LinearWeightPath`.
    """
    margs = [_marginal(m) for m in marginals]
    n = len(margs)
    Z = _grid_marginal(grid_z)
    path = lambda_path if lambda_path is not None else LinearWeightPath(n)
    if not hasattr(path, "derivative"):
        raise ValueError("lambda_path needs a derivative")
    _check_weight_path(path, n, np.linspace(0.0, eps_max, n_check))
    shape = tuple(m.size for m in margs) + (Z.size,)
    nd = n + 1
    dists = []
    for i, m in enumerate(margs):
        sh = [1] * nd
        sh[i] = m.size
        sh[n] = Z.size
        dists.append(np.broadcast_to(_sqdist(m, Z).reshape(sh), shape).ravel())
    dists = np.array(dists)  # (n, m)

    if getattr(path, "affine", False):
        cost = CostPath(np.asarray(path(0.0)) @ dists, np.asarray(path.derivative(0.0)) @ dists)
    else:
        second = getattr(path, "second", None)
        cost = CostPath(
            value=lambda e: np.asarray(path(e)) @ dists,
            derivative=lambda e: np.asarray(path.derivative(e)) @ dists,
            second=(lambda e: np.asarray(second(e)) @ dists) if second else None,
        )
    free = (False,) * n + (True,)
    return ProblemSpec(margs + [Z], cost, eta, free=free, family="barycenter",
                       meta={"z_axis": n, "lambda_path": path})


def z_marginal(problem, gamma):
    """Marginal of a coupling on the free coordinate."""
    ax = problem.meta.get("z_axis")
    if ax is None:
        raise ValueError("problem has no free coordinate")
    other = tuple(a for a in range(gamma.ndim) if a != ax)
    return gamma.sum(axis=other)


# -- bundled configurations ----------------------------------------------------------

def table_problem(name):
    """Reference configurations used in the acceptance suite and the CLI."""
    if name == "table1":
        m = DiscreteMarginal.uniform(0, 1, 100)
        return make_two_marginal(m, m, quadratic, 0.002)
    if name == "table2":
        m = DiscreteMarginal.uniform(0, 1, 100)
        return make_two_marginal(m, m, repulsive, 0.002)
    if name == "table3":
        m = DiscreteMarginal.uniform(0, 1, 99)
        return make_three_marginal([m, m, m], pairwise_repulsive, 0.006)
    if name == "table4":
        return make_martingale(DiscreteMarginal.uniform(-0.3, 0.3, 100),
                               DiscreteMarginal.uniform(-1, 1, 200),
                               spence_mirrlees, 0.006)
    if name == "table5":
        return make_multi_period(DiscreteMarginal.uniform(-0.1, 0.1, 30),
                                 DiscreteMarginal.uniform(-0.4, 0.4, 60),
                                 DiscreteMarginal.uniform(-1, 1, 90),
                                 multi_period_spence_mirrlees, 0.006)
    raise ValueError(f"unknown built-in configuration {name!r}")
