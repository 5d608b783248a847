"""Generic dual objective on a rank-reduced constraint system.

    Φ(φ, ε) = −bᵀφ + η Σ_ℓ exp((A_ℓφ − c_ℓ(ε))/η) 𝛍_ℓ

with 𝛍 the product reference measure. The summands w_ℓ are the Gibbs
coupling of φ; gradient, Hessian and the mixed ε-derivative are all moments
of w against the rows of A.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from otode.errors import ObjectiveOverflowError

LOG_SWITCH = 300.0
_LOG_MAX = np.log(np.finfo(float).max)


@dataclass(frozen=True)
class DualState:
    phi: np.ndarray
    epsilon: float


@dataclass
class EvalCache:
    """Exponential weights of one (φ, ε) evaluation.

    ``log_weights`` holds (A_ℓφ − c_ℓ)/η + log 𝛍_ℓ and ``max_exponent`` its
    maximum. ``weights`` is exp(log_weights); when the maximum exceeds
    ``LOG_SWITCH`` the sum of weights is only available through
    :meth:`log_total`.
    """

    log_weights: np.ndarray
    weights: np.ndarray
    max_exponent: float
    eps: float

    def log_total(self):
        M = self.max_exponent
        return M + np.log(np.exp(self.log_weights - M).sum())

    def require_finite(self):
        if self.max_exponent > _LOG_MAX or not np.all(np.isfinite(self.weights)):
            raise ObjectiveOverflowError(self.eps)


def evaluate(sys, cost, eta, state) -> EvalCache:
    phi = np.asarray(state.phi, dtype=float)
    if phi.shape != (sys.e,):
        raise ValueError(f"potential has length {phi.size}, system has {sys.e} columns")
    z = (sys.A @ phi - cost.value(state.epsilon)) / eta + sys.log_ref
    M = float(z.max())
    with np.errstate(over="ignore"):
        w = np.exp(z)
    return EvalCache(z, w, M, state.epsilon)


def phi_value(sys, cost, eta, state, cache=None):
    cache = cache or evaluate(sys, cost, eta, state)
    lin = -sys.b @ state.phi
    if cache.max_exponent <= LOG_SWITCH:
        return lin + eta * cache.weights.sum()
    lt = cache.log_total() + np.log(eta)
    if lt > _LOG_MAX:
        raise ObjectiveOverflowError(state.epsilon)
    return lin + np.exp(lt)


def gradient(sys, cost, eta, state, cache=None):
    cache = cache or evaluate(sys, cost, eta, state)
    cache.require_finite()
    return sys.A.T @ cache.weights - sys.b


def hessian(sys, cost, eta, state, cache=None):
    cache = cache or evaluate(sys, cost, eta, state)
    cache.require_finite()
    A = sys.A
    H = A.T @ (cache.weights[:, None] * A) / eta
    return 0.5 * (H + H.T)


def mixed_eps_gradient(sys, cost, eta, state, cache=None):
    """∂ε∇Φ = −(1/η) Σ_ℓ ∂εc_ℓ A_ℓᵀ w_ℓ."""
    cache = cache or evaluate(sys, cost, eta, state)
    cache.require_finite()
    return -(sys.A.T @ (cost.derivative(state.epsilon) * cache.weights)) / eta


def eps_derivative(sys, cost, eta, state, cache=None):
    """∂εΦ = −Σ_ℓ ∂εc_ℓ w_ℓ."""
    cache = cache or evaluate(sys, cost, eta, state)
    cache.require_finite()
    return -cost.derivative(state.epsilon) @ cache.weights


def second_eps(sys, cost, eta, state, cache=None):
    """∂²εΦ = (1/η) Σ (∂εc)² w − Σ ∂²εc w."""
    cache = cache or evaluate(sys, cost, eta, state)
    cache.require_finite()
    d1 = cost.derivative(state.epsilon)
    d2 = cost.second(state.epsilon)
    return (d1 * d1) @ cache.weights / eta - d2 @ cache.weights


def recover_primal(sys, cost, eta, state, cache=None):
    """Gibbs coupling γ_ℓ = exp((A_ℓφ − c_ℓ)/η) 𝛍_ℓ (flat)."""
    cache = cache or evaluate(sys, cost, eta, state)
    cache.require_finite()
    return cache.weights.copy()


def relative_entropy(gamma, log_ref):
    """Σ γ log(γ/𝛍) with the convention 0 log 0 = 0."""
    g = np.ravel(gamma)
    lr = np.ravel(log_ref)
    pos = g > 0
    return float(np.sum(g[pos] * (np.log(g[pos]) - lr[pos])))


def transport_cost(cost, eps, gamma):
    return float(cost.value(eps) @ np.ravel(gamma))


def primal_value(cost, eta, eps, gamma, log_ref):
    """c(ε)ᵀγ + η H(γ | 𝛍)."""
    return transport_cost(cost, eps, gamma) + eta * relative_entropy(gamma, log_ref)


class GenericObjective:
    """Φ on a problem's reduced system, with the interface the integrator uses.

    Potentials are in the gauge picked by :func:`otode.problem.reduce_full_rank`.
    """

    family = "generic"

    def __init__(self, problem):
        self.problem = problem
        self.sys = problem.system
        self.cost = problem.cost
        self.eta = problem.eta
        self._memo = None

    @property
    def dim(self):
        return self.sys.e

    def _cache(self, x, eps):
        key = (eps, x.tobytes())
        if self._memo is None or self._memo[0] != key:
            self._memo = (key, evaluate(self.sys, self.cost, self.eta, DualState(x, eps)))
        return self._memo[1]

    def _call(self, fn, x, eps):
        x = np.asarray(x, dtype=float)
        return fn(self.sys, self.cost, self.eta, DualState(x, eps), self._cache(x, eps))

    def value(self, x, eps):
        return self._call(phi_value, x, eps)

    def gradient(self, x, eps):
        return self._call(gradient, x, eps)

    def hessian(self, x, eps):
        return self._call(hessian, x, eps)

    def mixed(self, x, eps):
        return self._call(mixed_eps_gradient, x, eps)

    def eps_derivative(self, x, eps):
        return self._call(eps_derivative, x, eps)

    def second_eps(self, x, eps):
        return self._call(second_eps, x, eps)

    def coupling(self, x, eps):
        return self._call(recover_primal, x, eps).reshape(self.problem.shape)

    def to_blocks(self, x, eps=None):
        return self.problem.blocks_from_potential(x)

    def from_blocks(self, blocks):
        return self.problem.potential_from_blocks(blocks)
