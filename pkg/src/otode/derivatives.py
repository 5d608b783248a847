"""Derivatives of the optimal dual value C(ε) = min_φ Φ(φ, ε).

By the envelope identity C′(ε) = ∂εΦ at the minimizer. Differentiating once
more along the minimizer curve gives

    C″(ε) = ∂²εΦ − (∂ε∇Φ)ᵀ [D²Φ]⁻¹ (∂ε∇Φ).

At ε = 0 for the unconstrained two-marginal problem the minimizer is u = 0,
the Hessian is (1/η)(diag μ − μμᵀ) on the gauged coordinates and its inverse
has a rank-one closed form, which collapses C″(0) to moments of c under
μ ⊗ ν.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from math import comb

import numpy as np
from scipy import linalg

from otode.errors import ClosedFormScopeError, EnvelopePreconditionError
from otode.ode import make_objective
from otode.reduced import TwoMarginalKernel
from otode.sinkhorn import SinkhornConfig, sinkhorn_solve

STATIONARITY_TOL = 1e-8


@dataclass
class DerivativeReport:
    eps: float
    c_value: float
    c_prime: float
    c_second: float
    method: str

    def to_dict(self):
        return asdict(self)


def _as_x(objective, u):
    """Accept packed coordinates or block-layout/full-length potentials."""
    u = np.asarray(u, dtype=float) if not isinstance(u, list) else u
    if isinstance(u, np.ndarray) and u.shape == (objective.dim,):
        return u
    if isinstance(objective, TwoMarginalKernel):
        u = np.asarray(u, dtype=float)
        return objective.from_blocks([u])
    return objective.from_blocks(u)


def _stationary(objective, x, eps, tol):
    r = float(np.abs(objective.gradient(x, eps)).max())
    if r > tol:
        raise EnvelopePreconditionError(r)


def _require_plain_two_marginal(problem):
    if (problem.family != "two_marginal" or problem.basis.groups or any(problem.free)
            or len(problem.marginals) != 2):
        raise ClosedFormScopeError()


def c_prime(problem, u, eps, tol=STATIONARITY_TOL):
    """C′(ε) at a minimizer ``u`` (envelope identity, equals −∂εcᵀγ)."""
    obj = make_objective(problem)
    x = _as_x(obj, u)
    _stationary(obj, x, eps, tol)
    return float(obj.eps_derivative(x, eps))


def c_prime_zero(problem):
    """C′(0) = −E_{μ⊗ν}[∂εc] for problems whose ε = 0 optimum is the product."""
    _require_plain_two_marginal(problem)
    mu, nu = (m.weights for m in problem.marginals)
    dc = problem.dcost_grid(0.0)
    return float(-(mu @ dc @ nu))


def c_second_zero(problem):
    """Closed-form C″(0) for the unconstrained two-marginal problem.

    (1/η)((E c)² + E c² − E[(E[c|X])²] − E[(E[c|Y])²]) under μ ⊗ ν, with c the
    slope of the cost path.
    """
    _require_plain_two_marginal(problem)
    if np.any(problem.cost.value(0.0) != 0) or not problem.cost.affine:
        raise ClosedFormScopeError()
    mu, nu = (m.weights for m in problem.marginals)
    c = problem.dcost_grid(0.0)
    ec = mu @ c @ nu
    ec2 = mu @ (c * c) @ nu
    ecx = c @ nu
    ecy = mu @ c
    return float((ec * ec + ec2 - mu @ ecx ** 2 - nu @ ecy ** 2) / problem.eta)


def sherman_morrison_direction(problem):
    """[−D²Φ̄]⁻¹ ∂ε∇Φ̄ at ε = 0, u = 0, gauge u₀ = 0, without a solve.

    With H = (1/η)(D − μ'μ'ᵀ), D = diag μ', the inverse is
    η(D⁻¹ + 11ᵀ/μ₀).
    """
    _require_plain_two_marginal(problem)
    mu, nu = (m.weights for m in problem.marginals)
    c = problem.dcost_grid(0.0)
    g = mu * (mu @ c @ nu - c @ nu) / problem.eta  # ∂ε∇Φ̄ component i
    gp = g[1:]
    mp = mu[1:]
    return -problem.eta * (gp / mp + gp.sum() / mu[0])


def c_second_along_curve(problem, u, eps, tol=STATIONARITY_TOL):
    """C″(ε) from the reduced two-marginal Hessian and mixed derivative."""
    _require_plain_two_marginal(problem)
    k = TwoMarginalKernel(problem)
    x = _as_x(k, u)
    _stationary(k, x, eps, tol)
    H = k.hessian(x, eps)
    g = k.mixed(x, eps)
    fac = linalg.cho_factor(H, lower=True)
    return float(k.second_eps(x, eps) - g @ linalg.cho_solve(fac, g))


def report_along_curve(problem, u, eps):
    k = TwoMarginalKernel(problem)
    x = _as_x(k, u)
    return DerivativeReport(eps, float(k.value(x, eps)), c_prime(problem, x, eps),
                            c_second_along_curve(problem, x, eps), "along_curve")


def report_zero(problem):
    c0 = problem.eta  # Φ at u = 0, ε = 0: the product coupling has mass one
    return DerivativeReport(0.0, c0, c_prime_zero(problem), c_second_zero(problem),
                            "closed_form_zero")


# -- finite differences -----------------------------------------------------------

def fd_weights(nodes, order):
    """Weights w with Σ wⱼ f(nodes_j) ≈ f⁽ᵒʳᵈᵉʳ⁾(0) (Vandermonde solve)."""
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.size
    V = np.vander(nodes, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[order] = float(np.prod(np.arange(1, order + 1)))
    return np.linalg.solve(V, rhs)


def optimal_value(problem, eps, config=None, warm_start=None):
    """C(ε) = min Φ(·, ε) by Sinkhorn; returns (value, blocks)."""
    cfg = config or SinkhornConfig(tol=1e-13, max_iters=500_000)
    res = sinkhorn_solve(problem, eps, cfg, warm_start)
    return res.value, res.blocks


def c_second_fd(problem, h=1e-2, npts=8, config=None):
    """One-sided finite-difference C″(0) from Sinkhorn values at 0, h, ..., (npts−1)h."""
    vals, warm = [], None
    for j in range(npts):
        v, warm = optimal_value(problem, j * h, config, warm)
        vals.append(v)
    w = fd_weights(np.arange(npts), 2) / h ** 2
    return float(w @ np.array(vals))


def c_derivative_fd(problem, order, eps, h=1e-2, config=None):
    """Order-``order`` derivative of C at ε by forward differences of C′.

    C′ at each node comes from the envelope identity at a Sinkhorn minimizer,
    so only order − 1 numerical differentiations are applied. This is the hook
    for third and higher derivatives.
    """
    if order < 1:
        raise ValueError("order must be at least 1")
    obj = make_objective(problem)
    k = order - 1
    vals, warm = [], None
    for j in range(k + 1):
        e = eps + j * h
        _, warm = optimal_value(problem, e, config, warm)
        vals.append(obj.eps_derivative(obj.from_blocks(warm), e))
    coef = np.array([(-1) ** (k - j) * comb(k, j) for j in range(k + 1)])
    return float(coef @ np.array(vals) / h ** k)
