"""Block coordinate descent on the dual (generalized Sinkhorn).

The iterate is kept in the problem's block layout (one potential vector per
constrained marginal, one multiplier array per constraint group) together
with the log Gibbs tensor

    L = (Σ ψ + Σ p·q − c(ε))/η + log 𝛍,

which every block update shifts in place. Marginal blocks have a closed-form
update; a constraint group is updated by solving, independently for every
index of its conditioning axes, the monotone scalar equation
Σ exp(L + t q) q = 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from otode import kernels
from otode.errors import InfeasibleConstraintError

log = logging.getLogger(__name__)


@dataclass
class SinkhornConfig:
    """Stopping and safeguard parameters.

    ``tol`` bounds the max-norm of the constraint residual of the recovered
    coupling. ``refresh`` rebuilds L from the potentials every so many
    sweeps to stop rounding from piling up.
    """

    max_iters: int = 100_000
    tol: float = 1e-8
    newton_tol: float = 1e-12
    newton_max: int = 50
    damping: float = 1.0
    refresh: int = 100
    debug: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class SinkhornResult:
    blocks: list
    iterations: int
    residual: float
    converged: bool
    value: float
    eps: float
    history: list = field(default_factory=list)

    def __iter__(self):
        # unpacks as (potentials, iterations, final_residual)
        return iter((self.blocks, self.iterations, self.residual))


def _group_rows(arr, axes):
    """View ``arr`` as (rows over ``axes``, rest) with those axes leading."""
    nd = arr.ndim
    lead = list(axes)
    order = lead + [a for a in range(nd) if a not in axes]
    moved = np.transpose(arr, order)
    nrow = int(np.prod([arr.shape[a] for a in axes])) if axes else 1
    return np.ascontiguousarray(moved).reshape(nrow, -1)


def _expand(vals, axes, shape):
    sh = [1] * len(shape)
    for k, a in enumerate(axes):
        sh[a] = shape[a]
    return np.reshape(vals, sh)


class _Iterate:
    def __init__(self, problem, eps, blocks):
        self.problem = problem
        self.eps = eps
        self.eta = problem.eta
        self.blocks = [np.array(b, dtype=float) for b in blocks]
        self.cost = problem.cost_grid(eps)
        self.groups = problem.basis.groups
        self.F = [g.full_values(problem.shape) for g in self.groups]
        self.refresh()

    def refresh(self):
        p = self.problem
        self.L = (p.exponent(self.blocks) - self.cost) / self.eta + p.log_ref

    def update_marginal(self, k, axis, damping):
        mu = self.problem.marginals[axis]
        delta = damping * (np.log(mu.weights) - kernels.logsumexp_keep(self.L, axis))
        self.blocks[k] += self.eta * delta
        self.L += _expand(delta, (axis,), self.L.shape)

    def update_group(self, k, gidx, cfg):
        g = self.groups[gidx]
        X = _group_rows(self.L, g.axes)
        F = _group_rows(np.asarray(self.F[gidx]), g.axes)
        t = kernels.root_rows(X, F, cfg.newton_tol, cfg.newton_max)
        if np.any(np.isnan(t)):
            bad = int(np.flatnonzero(np.isnan(t))[0])
            raise InfeasibleConstraintError(
                f"group {g.label!r} row {bad}: test function has one sign on the support")
        t = cfg.damping * t
        tshape = [self.L.shape[a] for a in g.axes]
        self.blocks[k] = self.blocks[k] + self.eta * t.reshape(tshape)
        self.L += _expand(t.reshape(tshape), g.axes, self.L.shape) * self.F[gidx]

    def residual(self):
        gam = np.exp(self.L)
        p = self.problem
        r = 0.0
        for axis in p.constrained_axes:
            other = tuple(a for a in range(gam.ndim) if a != axis)
            r = max(r, np.abs(gam.sum(axis=other) - p.marginals[axis].weights).max())
        for g, F in zip(self.groups, self.F):
            other = tuple(a for a in range(gam.ndim) if a not in g.axes)
            r = max(r, np.abs((gam * F).sum(axis=other)).max())
        return float(r)

    def value(self):
        """Φ at the current potentials."""
        p = self.problem
        lin = sum(p.marginals[a].weights @ b
                  for a, b in zip(p.constrained_axes, self.blocks))
        return float(-lin + self.eta * np.exp(self.L).sum())


def sinkhorn_solve(problem, eps, config=None, warm_start=None) -> SinkhornResult:
    """Minimize Φ(·, ε) by cyclic exact block minimization.

    Parameters
    ----------
    problem : ProblemSpec
    eps : float
    config : SinkhornConfig, optional
    warm_start : list of arrays, optional
        Potentials in the problem's block layout.

    Returns
    -------
    SinkhornResult
        ``converged`` is False when ``max_iters`` was reached; the last
        iterate is returned in that case.
    """
    cfg = config or SinkhornConfig()
    if warm_start is None:
        warm_start = problem.full_to_blocks(np.zeros(sum(problem.block_sizes)))
    it = _Iterate(problem, eps, warm_start)
    axes = problem.constrained_axes
    nm = len(axes)
    history = []
    prev = it.value() if cfg.debug else None
    res = np.inf
    n = 0
    for n in range(1, cfg.max_iters + 1):
        if cfg.refresh and n % cfg.refresh == 0:
            it.refresh()
        for k, axis in enumerate(axes):
            it.update_marginal(k, axis, cfg.damping)
            prev = _check_descent(it, prev, cfg, history)
        for j in range(len(it.groups)):
            it.update_group(nm + j, j, cfg)
            prev = _check_descent(it, prev, cfg, history)
        res = it.residual()
        if res <= cfg.tol:
            break
    converged = res <= cfg.tol
    if not converged:
        log.warning("sinkhorn not converged at eps=%g after %d sweeps (residual %.3e)",
                    eps, n, res)
    return SinkhornResult(it.blocks, n, res, converged, it.value(), eps, history)


def _check_descent(it, prev, cfg, history):
    if not cfg.debug:
        return None
    val = it.value()
    history.append(val)
    slack = 1e-12 * max(1.0, abs(prev))
    if val > prev + slack:
        raise AssertionError(f"block update increased Φ: {prev!r} -> {val!r}")
    return val


def coupling_from_blocks(problem, eps, blocks):
    """Gibbs coupling (grid tensor) of block-layout potentials."""
    L = (problem.exponent(blocks) - problem.cost_grid(eps)) / problem.eta + problem.log_ref
    return np.exp(L)


def dual_value_at_optimum(problem, eps, config=None, warm_start=None):
    """−Φ at the Sinkhorn minimizer of Φ(·, ε)."""
    return -sinkhorn_solve(problem, eps, config, warm_start).value
