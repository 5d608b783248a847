"""Discrete marginals, product grids, cost paths and linear constraint systems.

Everything on the product grid uses row-major order with the first marginal
varying slowest, so a flat index ``l`` and the tensor index returned by
``np.unravel_index(l, shape)`` name the same cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg

from otode.errors import InconsistentBasisError, InfeasibleConstraintError

RANK_TOL = 1e-10
REPROJECTION_TOL = 1e-9


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class DiscreteMarginal:
    """Finitely supported probability measure.

    Parameters
    ----------
    points : array_like, shape (N,) or (N, d)
        Support points. One-dimensional input is treated as d = 1.
    weights : array_like, shape (N,), optional
        Positive probabilities summing to one. Uniform when omitted.
    """

    def __init__(self, points, weights=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("points must be a non-empty (N,) or (N, d) array")
        n = pts.shape[0]
        if weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(weights, dtype=float)
        if w.shape != (n,):
            raise ValueError(f"expected {n} weights, got shape {w.shape}")
        if not np.all(w > 0):
            raise ValueError("marginal weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"marginal weights sum to {w.sum():.17g}, not 1")
        if len(np.unique(pts, axis=0)) != n:
            raise ValueError("marginal support points must be pairwise distinct")
        self.points = _frozen(pts)
        self.weights = _frozen(w)

    @classmethod
    def uniform(cls, lo, hi, n):
        """Uniform weights on ``n`` equally spaced points of [lo, hi]."""
        return cls(np.linspace(lo, hi, n))

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def x(self):
        """Support as a flat vector (one-dimensional marginals only)."""
        if self.dim != 1:
            raise ValueError("x is only defined for one-dimensional supports")
        return self.points[:, 0]

    def mean(self):
        return self.weights @ self.points

    def __repr__(self):
        return f"DiscreteMarginal(size={self.size}, dim={self.dim})"


class ProductGrid:
    """Index bookkeeping for X¹ × ... × Xⁿ."""

    def __init__(self, sizes: Sequence[int]):
        self.shape = tuple(int(s) for s in sizes)
        if not self.shape or min(self.shape) < 1:
            raise ValueError("grid sizes must be positive")
        self.m = int(np.prod(self.shape))

    @property
    def ndim(self):
        return len(self.shape)

    def flatten(self, multi):
        return int(np.ravel_multi_index(tuple(multi), self.shape))

    def unflatten(self, flat):
        return tuple(int(i) for i in np.unravel_index(int(flat), self.shape))

    def axis_index(self, axis):
        """Flat vector holding the ``axis`` coordinate of every cell."""
        return np.indices(self.shape)[axis].ravel()


class CostPath:
    """ε-dependent cost on the grid.

    The affine form is ``c(ε) = base + ε·slope``. A general path is given by
    callables returning m-vectors; ``second`` is optional and falls back to a
    central difference of ``derivative``.
    """

    def __init__(self, base=None, slope=None, *, value: Optional[Callable] = None,
                 derivative: Optional[Callable] = None, second: Optional[Callable] = None):
        if value is not None:
            if derivative is None:
                raise ValueError("a general cost path needs a derivative callable")
            self.affine = False
            self._value, self._derivative, self._second = value, derivative, second
            self.base = _frozen(value(0.0))
            self.slope = None
            return
        if base is None and slope is None:
            raise ValueError("cost path needs base/slope or callables")
        if base is None:
            base = np.zeros_like(np.asarray(slope, dtype=float))
        if slope is None:
            slope = np.zeros_like(np.asarray(base, dtype=float))
        self.affine = True
        self.base = _frozen(np.ravel(base))
        self.slope = _frozen(np.ravel(slope))
        if self.base.shape != self.slope.shape:
            raise ValueError("base and slope must have the same length")

    @classmethod
    def scaled(cls, c):
        """The path ε·c used by the plain regularized problems."""
        c = np.ravel(np.asarray(c, dtype=float))
        return cls(np.zeros_like(c), c)

    @property
    def size(self):
        return self.base.size

    def value(self, eps):
        if self.affine:
            return self.base + eps * self.slope
        return np.asarray(self._value(eps), dtype=float).ravel()

    def derivative(self, eps):
        if self.affine:
            return self.slope
        return np.asarray(self._derivative(eps), dtype=float).ravel()

    def second(self, eps):
        if self.affine:
            return np.zeros_like(self.base)
        if self._second is not None:
            return np.asarray(self._second(eps), dtype=float).ravel()
        h = 1e-5
        return (self.derivative(eps + h) - self.derivative(eps - h)) / (2 * h)


@dataclass(frozen=True)
class ConstraintGroup:
    """A family of constraint vectors sharing one test function.

    For every index ``k`` over the grid axes listed in ``axes`` the group
    contributes the vector ``values * [x_axes == k]``. With ``axes=()`` the
    group is a single vector. ``values`` is broadcast to the grid shape.
    """

    axes: tuple
    values: np.ndarray
    label: str = "q"

    def full_values(self, shape):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1 and len(shape) > 1 and v.size == int(np.prod(shape)):
            v = v.reshape(shape)  # flat vector in row-major grid order
        return np.broadcast_to(v, shape)

    def n_columns(self, shape):
        return int(np.prod([shape[a] for a in self.axes])) if self.axes else 1

    def column_labels(self, shape):
        if not self.axes:
            return [self.label]
        idx = np.ndindex(*[shape[a] for a in self.axes])
        return [f"{self.label}{list(k)}" for k in idx]

    def matrix(self, shape):
        """Dense (m, n_columns) block of constraint vectors."""
        vals = self.full_values(shape).ravel()
        m = vals.size
        ncol = self.n_columns(shape)
        C = np.zeros((m, ncol))
        if not self.axes:
            C[:, 0] = vals
            return C
        col = self.column_index(shape).ravel()
        C[np.arange(m), col] = vals
        return C

    def column_index(self, shape):
        """Grid tensor giving the column each cell belongs to."""
        if not self.axes:
            return np.zeros(shape, dtype=np.intp)
        ind = np.indices(shape)
        sub = [ind[a] for a in self.axes]
        return np.ravel_multi_index(sub, [shape[a] for a in self.axes])


@dataclass(frozen=True)
class ConstraintBasis:
    groups: tuple = ()

    @classmethod
    def from_vectors(cls, vectors, labels=None):
        vectors = [np.asarray(v, dtype=float).ravel() for v in vectors]
        labels = labels or [f"q{j}" for j in range(len(vectors))]
        return cls(tuple(ConstraintGroup((), v, lab) for v, lab in zip(vectors, labels)))

    def K(self, shape):
        return sum(g.n_columns(shape) for g in self.groups)

    def labels(self, shape):
        return [lab for g in self.groups for lab in g.column_labels(shape)]

    def matrix(self, shape):
        m = int(np.prod(shape))
        if not self.groups:
            return np.zeros((m, 0))
        return np.hstack([g.matrix(shape) for g in self.groups])

    def vectors(self, shape):
        return list(self.matrix(shape).T)


@dataclass
class LinearSystem:
    """Constraint system A = [B, C], b = [μ, 0].

    ``kept`` lists the columns of the unreduced system that survive; for an
    unreduced system it is ``arange(e)``.
    """

    A: np.ndarray
    b: np.ndarray
    labels: list
    n_marginal_cols: int
    kept: np.ndarray
    n_full: int
    log_ref: np.ndarray
    reduced: bool = False

    @property
    def e(self):
        return self.A.shape[1]

    @property
    def m(self):
        return self.A.shape[0]


def build_system(marginals, free_flags=None, basis=None) -> LinearSystem:
    """Assemble the unreduced constraint system.

    Free marginals get no indicator columns; their uniform reference weight
    lives in the problem's reference measure, not here.
    """
    marginals = list(marginals)
    free_flags = list(free_flags) if free_flags is not None else [False] * len(marginals)
    if len(free_flags) != len(marginals):
        raise ValueError("free_flags must have one entry per marginal")
    if all(free_flags):
        raise ValueError("at least one marginal must be constrained")
    grid = ProductGrid([mu.size for mu in marginals])
    if basis is None:
        basis = ConstraintBasis()
    elif not isinstance(basis, ConstraintBasis):
        vecs = list(basis)
        bad = [len(np.ravel(v)) for v in vecs if len(np.ravel(v)) != grid.m]
        if bad:
            raise InconsistentBasisError(f"vector of length {bad[0]} on a grid of size {grid.m}")
        basis = ConstraintBasis.from_vectors(vecs)
    for g in basis.groups:
        try:
            g.full_values(grid.shape)
        except ValueError as exc:
            raise InconsistentBasisError(
                f"group {g.label!r} does not fit grid {grid.shape}") from exc
        if any(a >= grid.ndim for a in g.axes) or list(g.axes) != sorted(set(g.axes)):
            raise InconsistentBasisError(f"group {g.label!r} needs increasing valid axes")

    cols, b, labels = [], [], []
    for i, (mu, free) in enumerate(zip(marginals, free_flags)):
        if free:
            continue
        Bi = np.zeros((grid.m, mu.size))
        Bi[np.arange(grid.m), grid.axis_index(i)] = 1.0
        cols.append(Bi)
        b.append(mu.weights)
        labels += [f"psi{i}[{j}]" for j in range(mu.size)]
    nb = sum(c.shape[1] for c in cols)
    C = basis.matrix(grid.shape)
    cols.append(C)
    b.append(np.zeros(C.shape[1]))
    labels += basis.labels(grid.shape)
    A = np.hstack(cols)
    e = A.shape[1]
    log_ref = np.zeros(grid.shape)
    for i, mu in enumerate(marginals):
        log_ref = log_ref + _along(np.log(mu.weights), i, grid.ndim)
    return LinearSystem(A, np.concatenate(b), labels, nb, np.arange(e), e,
                        log_ref.ravel(), False)


def reduce_full_rank(sys: LinearSystem) -> LinearSystem:
    """Drop dependent columns greedily, indicator columns first.

    A column is dropped when its component orthogonal to the columns already
    kept is below ``RANK_TOL`` relative to the largest column norm. Every
    dropped column is then checked to lie, together with its entry of b, in
    the span of the kept ``[bᵀ; A]`` columns.
    """
    A = sys.A
    m, e = A.shape
    norms = np.linalg.norm(A, axis=0)
    scale = norms.max() if e else 1.0
    Q = np.zeros((m, e))
    keep, drop = [], []
    for j in range(e):
        v = A[:, j].copy()
        k = len(keep)
        if k:
            for _ in range(2):  # classical Gram-Schmidt, reorthogonalized
                v -= Q[:, :k] @ (Q[:, :k].T @ v)
        r = np.linalg.norm(v)
        if r > RANK_TOL * scale:
            Q[:, k] = v / r
            keep.append(j)
        else:
            drop.append(j)
    keep = np.array(keep, dtype=np.intp)
    drop = np.array(drop, dtype=np.intp)
    if drop.size:
        M = np.vstack([sys.b[None, :], A])
        coef, *_ = linalg.lstsq(M[:, keep], M[:, drop])
        resid = np.linalg.norm(M[:, keep] @ coef - M[:, drop], axis=0)
        tol = REPROJECTION_TOL * np.maximum(1.0, np.linalg.norm(M[:, drop], axis=0))
        bad = np.flatnonzero(resid > tol)
        if bad.size:
            j = drop[bad[0]]
            raise InfeasibleConstraintError(
                f"column {sys.labels[j]} leaves the range (residual {resid[bad[0]]:.3e})")
    n_marg = int(np.sum(keep < sys.n_marginal_cols))
    return LinearSystem(A[:, keep], sys.b[keep], [sys.labels[j] for j in keep],
                        n_marg, sys.kept[keep], sys.n_full, sys.log_ref, True)


@dataclass
class ProblemSpec:
    """A discrete regularized transport problem.

    Parameters
    ----------
    marginals : list of DiscreteMarginal
    cost : CostPath
        Cost on the flattened grid.
    eta : float
        Entropic regularization strength.
    free : sequence of bool, optional
        Marks marginals without a constraint; their reference is uniform.
    basis : ConstraintBasis, optional
        Extra linear constraints ∫ q dγ = 0.
    family : str
        Tag used to pick reduced kernels and initial conditions.
    """

    marginals: list
    cost: CostPath
    eta: float
    free: tuple = None
    basis: ConstraintBasis = field(default_factory=ConstraintBasis)
    family: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.marginals = list(self.marginals)
        if self.free is None:
            self.free = (False,) * len(self.marginals)
        self.free = tuple(bool(f) for f in self.free)
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.cost.size != self.grid.m:
            raise ValueError(f"cost has {self.cost.size} entries, grid has {self.grid.m}")
        for i, f in enumerate(self.free):
            if f and not np.allclose(self.marginals[i].weights, 1.0 / self.marginals[i].size):
                raise ValueError("a free marginal must carry uniform weights")

    @cached_property
    def grid(self):
        return ProductGrid([mu.size for mu in self.marginals])

    @property
    def shape(self):
        return self.grid.shape

    @property
    def constrained_axes(self):
        return [i for i, f in enumerate(self.free) if not f]

    @cached_property
    def log_ref_axes(self):
        """Per-axis log reference weights (uniform on free axes)."""
        return [np.log(mu.weights) for mu in self.marginals]

    @cached_property
    def log_ref(self):
        """log 𝛍 on the grid, as a tensor."""
        out = np.zeros(self.shape)
        for i, lw in enumerate(self.log_ref_axes):
            out = out + _along(lw, i, len(self.shape))
        return out

    def cost_grid(self, eps):
        return self.cost.value(eps).reshape(self.shape)

    def dcost_grid(self, eps):
        return self.cost.derivative(eps).reshape(self.shape)

    # -- block layout of the unreduced potentials -------------------------

    @property
    def block_sizes(self):
        sizes = [self.marginals[i].size for i in self.constrained_axes]
        sizes += [g.n_columns(self.shape) for g in self.basis.groups]
        return sizes

    def full_to_blocks(self, vec):
        """Split an unreduced potential vector into per-block arrays.

        Marginal blocks are vectors; constraint blocks are shaped over the
        group's conditioning axes (scalar groups become shape ()).
        """
        out, k = [], 0
        for i in self.constrained_axes:
            n = self.marginals[i].size
            out.append(np.array(vec[k:k + n]))
            k += n
        for g in self.basis.groups:
            n = g.n_columns(self.shape)
            out.append(np.array(vec[k:k + n]).reshape([self.shape[a] for a in g.axes]))
            k += n
        return out

    def blocks_to_full(self, blocks):
        return np.concatenate([np.ravel(b) for b in blocks]) if blocks else np.zeros(0)

    def exponent(self, blocks):
        """Σᵢ ψⁱ(xᵢ) + Σ_g p_g · q_g on the grid (no cost, no η scaling)."""
        nd = len(self.shape)
        out = np.zeros(self.shape)
        nm = len(self.constrained_axes)
        for i, psi in zip(self.constrained_axes, blocks[:nm]):
            out = out + _along(psi, i, nd)
        for g, p in zip(self.basis.groups, blocks[nm:]):
            out = out + _spread(p, g.axes, nd) * g.full_values(self.shape)
        return out

    @cached_property
    def full_system(self):
        return build_system(self.marginals, self.free, self.basis)

    @cached_property
    def system(self):
        """Rank-reduced constraint system (built on first use)."""
        return reduce_full_rank(self.full_system)

    def potential_from_blocks(self, blocks):
        """Reduced potential φ with Âφ equal to the blocks' exponent."""
        s = self.exponent(blocks).ravel()
        phi, *_ = linalg.lstsq(self.system.A, s)
        return phi

    def blocks_from_potential(self, phi):
        full = np.zeros(self.system.n_full)
        full[self.system.kept] = phi
        return self.full_to_blocks(full)


def _along(vec, axis, ndim):
    shape = [1] * ndim
    shape[axis] = -1
    return np.reshape(vec, shape)


def _spread(arr, axes, ndim):
    """Reshape ``arr`` (shaped over ``axes``) so it broadcasts on the grid."""
    arr = np.asarray(arr, dtype=float)
    shape = [1] * ndim
    for k, a in enumerate(axes):
        shape[a] = arr.shape[k]
    return arr.reshape(shape)
