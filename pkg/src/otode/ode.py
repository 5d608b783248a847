"""Continuation in ε by integrating dφ/dε = −[D²Φ]⁻¹ ∂ε∇Φ with classical RK4.

The integrator works with any objective exposing ``value``, ``gradient``,
``hessian``, ``mixed``, ``coupling``, ``to_blocks`` and ``from_blocks`` (the
generic objective in :mod:`otode.dual` and the kernels in
:mod:`otode.reduced`).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from otode.dual import GenericObjective, primal_value, transport_cost
from otode.errors import InitialConditionError, ODEStalledError
from otode.reduced import KERNELS, reduced_objective
from otode.sinkhorn import SinkhornConfig, sinkhorn_solve

log = logging.getLogger(__name__)


def make_objective(problem, generic=False):
    """Reduced kernel when the family has one, generic objective otherwise."""
    if not generic and problem.family in KERNELS:
        return reduced_objective(problem)
    return GenericObjective(problem)


@dataclass
class SolveStats:
    factorizations: int = 0
    jitter_retries: int = 0
    polish_steps: int = 0


@dataclass
class CurveSample:
    eps: float
    phi: np.ndarray
    dual_value: float
    primal_value: float
    transport_cost: float
    grad_inf_norm: float
    coupling: Optional[np.ndarray] = None


@dataclass
class SolutionCurve:
    """Samples of the integrated trajectory at every grid point of [0, ε_max]."""

    samples: list
    steps: int
    eps_max: float
    family: str
    stats: SolveStats = field(default_factory=SolveStats)
    wall_ms: float = 0.0

    @property
    def epsilons(self):
        return np.array([s.eps for s in self.samples])

    @property
    def dual_values(self):
        return np.array([s.dual_value for s in self.samples])

    @property
    def primal_values(self):
        return np.array([s.primal_value for s in self.samples])

    @property
    def grad_norms(self):
        return np.array([s.grad_inf_norm for s in self.samples])

    @property
    def final(self):
        return self.samples[-1]

    def snapshots(self):
        return [(k, s) for k, s in enumerate(self.samples) if s.coupling is not None]


def _solve_spd(H, g, eps, stats):
    stats.factorizations += 1
    try:
        fac = linalg.cho_factor(H, lower=True, check_finite=False)
    except linalg.LinAlgError:
        stats.jitter_retries += 1
        jitter = 1e-12 * np.trace(H) / H.shape[0]
        try:
            fac = linalg.cho_factor(H + jitter * np.eye(H.shape[0]), lower=True,
                                    check_finite=False)
        except linalg.LinAlgError:
            raise ODEStalledError(eps, "Hessian not positive definite after jitter") from None
    x = linalg.cho_solve(fac, g, check_finite=False)
    r = H @ x - g
    scale = max(np.abs(g).max(), np.finfo(float).tiny)
    if np.abs(r).max() > 1e-10 * scale:
        x -= linalg.cho_solve(fac, r, check_finite=False)  # one refinement sweep
    return x


def rhs(objective, x, eps, stats=None):
    """Right-hand side −H⁻¹ ∂ε∇Φ at (x, ε)."""
    stats = stats if stats is not None else SolveStats()
    H = objective.hessian(x, eps)
    g = objective.mixed(x, eps)
    if not np.all(np.isfinite(H)) or not np.all(np.isfinite(g)):
        raise ODEStalledError(eps, "non-finite Hessian or mixed derivative")
    return -_solve_spd(H, g, eps, stats)


def newton_solve(objective, x, eps, tol=1e-12, max_iter=50, stats=None):
    """Damped Newton on Φ(·, ε); stops when ‖∇Φ‖∞ ≤ tol."""
    stats = stats if stats is not None else SolveStats()
    x = np.array(x, dtype=float)
    for _ in range(max_iter):
        g = objective.gradient(x, eps)
        if np.abs(g).max() <= tol:
            break
        d = -_solve_spd(objective.hessian(x, eps), g, eps, stats)
        f0 = objective.value(x, eps)
        slope = g @ d
        # near the minimizer the Armijo decrease drops below the rounding
        # error of Φ itself; accept steps that are within that noise
        slack = 8 * np.finfo(float).eps * (1.0 + abs(f0))
        t = 1.0
        while t > 1e-10:
            xn = x + t * d
            try:
                fn = objective.value(xn, eps)
            except (ArithmeticError, ValueError):
                fn = np.inf
            if fn <= f0 + 1e-4 * t * slope + slack:
                break
            t *= 0.5
        else:
            break  # no acceptable step: keep the current point
        x = xn
    return x


def _closed_form_blocks(problem):
    """Initial potentials when c(0) depends on one constrained axis only.

    That axis gets ψ = −η log Σ exp(−c(0)/η) over the free coordinates (with
    their uniform reference); all other potentials are zero. Returns None when
    the cost does not have that structure.
    """
    if problem.basis.groups:
        return None
    c0 = problem.cost.value(0.0).reshape(problem.shape)
    axes = problem.constrained_axes
    free_axes = [a for a in range(len(problem.shape)) if problem.free[a]]
    owner = None
    for a in axes:
        others = [b for b in axes if b != a]
        ref = c0[tuple(slice(0, 1) if b in others else slice(None)
                       for b in range(c0.ndim))]
        if np.allclose(c0, ref, rtol=0, atol=0):
            owner = a
            break
    if owner is None:
        return None
    blocks = problem.full_to_blocks(np.zeros(sum(problem.block_sizes)))
    sl = tuple(slice(None) if (b == owner or b in free_axes) else 0 for b in range(c0.ndim))
    sub = -c0[sl] / problem.eta  # axes: owner and free ones, in order
    kept = [b for b in range(c0.ndim) if b == owner or b in free_axes]
    for b in kept:
        if b in free_axes:
            sh = [1] * len(kept)
            sh[kept.index(b)] = -1
            sub = sub + problem.log_ref_axes[b].reshape(sh)
    sub = np.moveaxis(sub, kept.index(owner), 0).reshape(problem.shape[owner], -1)
    m = sub.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(sub - m).sum(axis=1))
    blocks[axes.index(owner)] = -problem.eta * lse
    return blocks


def initial_potential(problem, objective=None, init_tol=1e-10, config=None):
    """Minimizer of Φ(·, 0) in the objective's coordinates.

    Zero when the base cost vanishes and nothing but marginals is imposed,
    closed form when the base cost only involves one constrained coordinate,
    Sinkhorn otherwise.
    """
    objective = objective or make_objective(problem)
    no_free = not any(problem.free)
    if not problem.basis.groups and no_free and np.all(problem.cost.value(0.0) == 0):
        x0 = np.zeros(objective.dim)
        method = "zero"
    else:
        blocks = _closed_form_blocks(problem)
        method = "closed_form"
        if blocks is None:
            cfg = config or SinkhornConfig(tol=0.1 * init_tol, max_iters=200_000)
            res = sinkhorn_solve(problem, 0.0, cfg)
            if not res.converged:
                raise InitialConditionError(
                    f"sinkhorn residual {res.residual:.3e} after {res.iterations} sweeps")
            blocks = res.blocks
            method = "sinkhorn"
        x0 = objective.from_blocks(blocks)
    g = np.abs(objective.gradient(x0, 0.0)).max()
    if g > init_tol:
        x0 = newton_solve(objective, x0, 0.0, tol=init_tol)
        g = np.abs(objective.gradient(x0, 0.0)).max()
        if g > init_tol:
            raise InitialConditionError(f"{method} start has gradient {g:.3e}")
    log.debug("initial potential by %s, gradient %.2e", method, g)
    return x0


def _snapshot_indices(steps, snapshots):
    if snapshots <= 0:
        return set()
    if snapshots == 1:
        return {steps}
    return set(int(round(j * steps / (snapshots - 1))) for j in range(snapshots))


def integrate(problem, steps=100, eps_max=1.0, record_couplings=True, snapshots=16,
              polish_every=0, objective=None, x0=None, generic=False,
              final_tol=None) -> SolutionCurve:
    """RK4 on a uniform grid of ``steps`` intervals over [0, eps_max].

    Parameters
    ----------
    polish_every : int
        When positive, take one damped Newton step on Φ(·, ε_k) after every
        that many RK4 steps. Off by default.
    final_tol : float, optional
        When given, the endpoint is refined by Newton on Φ(·, ε_max) until
        ‖∇Φ‖∞ ≤ final_tol (at most 20 steps); the last sample is replaced.
    snapshots : int
        Number of evenly spaced grid points at which the coupling is kept
        (when ``record_couplings``).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    t0 = time.perf_counter()
    obj = objective or make_objective(problem, generic=generic)
    stats = SolveStats()
    x = initial_potential(problem, obj) if x0 is None else np.array(x0, dtype=float)
    h = eps_max / steps
    keep = _snapshot_indices(steps, snapshots) if record_couplings else set()
    samples = [_sample(problem, obj, x, 0.0, 0 in keep)]
    for k in range(steps):
        e = k * h
        try:
            k1 = rhs(obj, x, e, stats)
            k2 = rhs(obj, x + 0.5 * h * k1, e + 0.5 * h, stats)
            k3 = rhs(obj, x + 0.5 * h * k2, e + 0.5 * h, stats)
            k4 = rhs(obj, x + h * k3, e + h, stats)
        except ODEStalledError:
            raise
        except (ArithmeticError, ValueError) as exc:
            raise ODEStalledError(e, f"{problem.family}: {exc}") from exc
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        e1 = (k + 1) * h
        if polish_every and (k + 1) % polish_every == 0:
            x = newton_solve(obj, x, e1, max_iter=1, tol=0.0, stats=stats)
            stats.polish_steps += 1
        samples.append(_sample(problem, obj, x, e1, (k + 1) in keep))
    if final_tol is not None:
        before = stats.factorizations
        x = newton_solve(obj, x, eps_max, tol=final_tol, max_iter=20, stats=stats)
        stats.polish_steps += stats.factorizations - before
        samples[-1] = _sample(problem, obj, x, eps_max, steps in keep)
    wall = 1e3 * (time.perf_counter() - t0)
    return SolutionCurve(samples, steps, eps_max, getattr(obj, "family", problem.family),
                         stats, wall)


def _sample(problem, obj, x, eps, with_coupling):
    gam = obj.coupling(x, eps)
    flat = gam.ravel()
    return CurveSample(
        eps=eps,
        phi=x.copy(),
        dual_value=float(obj.value(x, eps)),
        primal_value=primal_value(problem.cost, problem.eta, eps, flat, problem.log_ref),
        transport_cost=transport_cost(problem.cost, eps, flat),
        grad_inf_norm=float(np.abs(obj.gradient(x, eps)).max()),
        coupling=gam.copy() if with_coupling else None,
    )
