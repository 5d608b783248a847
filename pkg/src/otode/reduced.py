"""Family-specific reduced dual objectives.

Each kernel removes one marginal potential ψ_r of axis ``elim`` in closed
form,

    ψ_r = −η log Σ_{ℓ: ℓ_elim = r} exp((θ·F_ℓ − c_ℓ)/η) 𝛍_ℓ / μ_r,

and works with the retained blocks θ. With p_r the Gibbs law conditional on
the eliminated coordinate, every derivative is a weighted conditional moment:

    Φ̄        = −b_θᵀθ + η Σ_r μ_r log S_r + η
    ∇Φ̄       = −b_θ + Σ_r μ_r E_r[F]
    D²Φ̄      = (1/η) Σ_r μ_r Cov_r(F)
    ∂ε∇Φ̄     = −(1/η) Σ_r μ_r Cov_r(F, ∂εc)
    ∂²εΦ̄     = (1/η) Σ_r μ_r Var_r(∂εc) − Σ_r μ_r E_r[∂²εc]

The covariance blocks are written out per family so that no dense feature
matrix is ever formed. One entry per marginal-type block (and one per
constraint block) is pinned to zero to fix the gauge; the free variables are
packed into a flat vector ``x`` in block order.
"""

from __future__ import annotations

import numpy as np

from otode import kernels


class ReducedKernel:
    """Common machinery; subclasses define the blocks and the moments."""

    family = None
    elim = None
    block_names = ()

    def __init__(self, problem):
        self.problem = problem
        self.eta = problem.eta
        self.shape = problem.shape
        self.mu_elim = problem.marginals[self.elim].weights
        self.log_mu_elim = np.log(self.mu_elim)
        nd = len(self.shape)
        sh = [1] * nd
        sh[self.elim] = -1
        self._log_ref_rest = problem.log_ref - self.log_mu_elim.reshape(sh)
        self._memo = None
        self._layout()

    # -- packing ------------------------------------------------------------

    def _layout(self):
        self.block_shapes = [tuple(s) for s in self._block_shapes()]
        self.block_sizes = [int(np.prod(s)) for s in self.block_shapes]
        offs = np.cumsum([0] + self.block_sizes)
        self.block_slices = [slice(a, b) for a, b in zip(offs[:-1], offs[1:])]
        mask = np.ones(offs[-1], dtype=bool)
        for sl in self.block_slices:
            mask[sl.start] = False  # the first entry of every block is pinned
        self.free = mask
        self.n_pinned = int((~mask).sum())
        self.n_eliminated = self.shape[self.elim]

    @property
    def dim(self):
        return int(self.free.sum())

    @property
    def n_retained(self):
        return self.dim

    def unpack(self, x):
        full = np.zeros(self.free.size)
        full[self.free] = x
        return [full[sl].reshape(s) for sl, s in zip(self.block_slices, self.block_shapes)]

    def pack(self, blocks):
        full = np.concatenate([np.ravel(b) for b in blocks])
        pinned = full[~self.free]
        if np.any(pinned != 0):
            raise ValueError("pinned gauge entries must be zero; re-gauge first")
        return full[self.free]

    # -- evaluation -----------------------------------------------------------

    def _state(self, x, eps):
        x = np.asarray(x, dtype=float)
        key = (eps, x.tobytes())
        if self._memo is not None and self._memo[0] == key:
            return self._memo[1]
        blocks = self.unpack(x)
        c = self.problem.cost_grid(eps)
        L = (self._features_dot(blocks) - c) / self.eta + self._log_ref_rest
        lse = kernels.logsumexp_keep(L, self.elim)
        p = np.exp(L - self._bcast(lse))
        st = {"blocks": blocks, "lse": lse, "p": p, "eps": eps}
        self._memo = (key, st)
        return st

    def _bcast(self, v):
        sh = [1] * len(self.shape)
        sh[self.elim] = -1
        return np.reshape(v, sh)

    def eliminate(self, x, eps):
        """Closed-form value of the eliminated potential block."""
        return -self.eta * self._state(x, eps)["lse"]

    def value(self, x, eps):
        st = self._state(x, eps)
        lin = sum(np.sum(b * t) for b, t in zip(self._b_blocks(), st["blocks"]))
        return -lin + self.eta * (self.mu_elim @ st["lse"]) + self.eta

    def coupling(self, x, eps):
        return self._bcast(self.mu_elim) * self._state(x, eps)["p"]

    def gradient(self, x, eps):
        st = self._state(x, eps)
        g = self._first_moments(st)
        full = np.concatenate([np.ravel(a) - np.ravel(b) for a, b in zip(g, self._b_blocks())])
        return full[self.free]

    def hessian(self, x, eps):
        H = self._hessian_full(self._state(x, eps)) / self.eta
        H = H[np.ix_(self.free, self.free)]
        return 0.5 * (H + H.T)

    def mixed(self, x, eps):
        st = self._state(x, eps)
        dc = self.problem.dcost_grid(eps)
        full = np.concatenate([np.ravel(v) for v in self._cov_with(st, dc)])
        return -full[self.free] / self.eta

    def eps_derivative(self, x, eps):
        st = self._state(x, eps)
        gamma = self._bcast(self.mu_elim) * st["p"]
        return -float(np.sum(gamma * self.problem.dcost_grid(eps)))

    def second_eps(self, x, eps):
        st = self._state(x, eps)
        p = st["p"]
        dc = self.problem.dcost_grid(eps)
        d2 = self.problem.cost.second(eps).reshape(self.shape)
        rest = tuple(a for a in range(len(self.shape)) if a != self.elim)
        m1 = np.sum(p * dc, axis=rest)
        m2 = np.sum(p * dc * dc, axis=rest)
        e2 = np.sum(p * d2, axis=rest)
        return float(self.mu_elim @ (m2 - m1 * m1)) / self.eta - float(self.mu_elim @ e2)

    # -- gauge ----------------------------------------------------------------

    def to_blocks(self, x, eps):
        """Potentials in the problem's block layout, eliminated block included."""
        raise NotImplementedError

    def from_blocks(self, blocks):
        """Re-gauge problem-layout potentials and pack the retained blocks."""
        raise NotImplementedError

    # -- family hooks ---------------------------------------------------------

    def _block_shapes(self):
        raise NotImplementedError

    def _b_blocks(self):
        raise NotImplementedError

    def _features_dot(self, blocks):
        raise NotImplementedError

    def _first_moments(self, st):
        raise NotImplementedError

    def _hessian_full(self, st):
        raise NotImplementedError

    def _cov_with(self, st, f):
        raise NotImplementedError


def _x(problem, i):
    return problem.marginals[i].x


class TwoMarginalKernel(ReducedKernel):
    """Eliminates v (second marginal); retains u with u₀ = 0."""

    family = "two_marginal"
    elim = 1
    block_names = ("u",)

    def _block_shapes(self):
        return [(self.shape[0],)]

    def _b_blocks(self):
        return [self.problem.marginals[0].weights]

    def _features_dot(self, blocks):
        return blocks[0][:, None]

    def _first_moments(self, st):
        return [(st["p"] * self.mu_elim).sum(axis=1)]

    def _hessian_full(self, st):
        pn = st["p"] * self.mu_elim  # γ_rs
        return np.diag(pn.sum(axis=1)) - pn @ st["p"].T

    def _cov_with(self, st, f):
        p = st["p"]
        ef = (p * f).sum(axis=0)  # E_s[f]
        return [((p * (f - ef)) * self.mu_elim).sum(axis=1)]

    def to_blocks(self, x, eps):
        (u,) = self.unpack(x)
        return [u, self.eliminate(x, eps)]

    def from_blocks(self, blocks):
        u = np.asarray(blocks[0], dtype=float)
        return self.pack([u - u[0]])


class ThreeMarginalKernel(ReducedKernel):
    """Eliminates w (third marginal); retains u, v with u₀ = v₀ = 0."""

    family = "three_marginal"
    elim = 2
    block_names = ("u", "v")

    def _block_shapes(self):
        return [(self.shape[0],), (self.shape[1],)]

    def _b_blocks(self):
        return [self.problem.marginals[0].weights, self.problem.marginals[1].weights]

    def _features_dot(self, blocks):
        u, v = blocks
        return u[:, None, None] + v[None, :, None]

    def _first_moments(self, st):
        g = st["p"] * self.mu_elim
        return [g.sum(axis=(1, 2)), g.sum(axis=(0, 2))]

    def _hessian_full(self, st):
        p = st["p"]
        nu = self.mu_elim
        g = p * nu
        Pu = p.sum(axis=1)  # (r, t)
        Pv = p.sum(axis=0)  # (s, t)
        Huu = np.diag(g.sum(axis=(1, 2))) - (Pu * nu) @ Pu.T
        Hvv = np.diag(g.sum(axis=(0, 2))) - (Pv * nu) @ Pv.T
        Huv = g.sum(axis=2) - (Pu * nu) @ Pv.T
        return np.block([[Huu, Huv], [Huv.T, Hvv]])

    def _cov_with(self, st, f):
        p = st["p"]
        nu = self.mu_elim
        ef = (p * f).sum(axis=(0, 1))  # (t,)
        pf = p * f * nu
        cu = pf.sum(axis=(1, 2)) - (p.sum(axis=1) * nu) @ ef
        cv = pf.sum(axis=(0, 2)) - (p.sum(axis=0) * nu) @ ef
        return [cu, cv]

    def to_blocks(self, x, eps):
        u, v = self.unpack(x)
        return [u, v, self.eliminate(x, eps)]

    def from_blocks(self, blocks):
        u, v = (np.asarray(b, dtype=float) for b in blocks[:2])
        return self.pack([u - u[0], v - v[0]])


class MartingaleKernel(ReducedKernel):
    """Eliminates u (first marginal); retains v and the multipliers g.

    Cell (i, s) carries the features [s-indicator] and g_i·(y_s − x_i).
    Gauge: v₀ = g₀ = 0.
    """

    family = "martingale"
    elim = 0
    block_names = ("v", "g")

    def __init__(self, problem):
        self.D = _x(problem, 1)[None, :] - _x(problem, 0)[:, None]
        super().__init__(problem)

    def _block_shapes(self):
        return [(self.shape[1],), (self.shape[0],)]

    def _b_blocks(self):
        return [self.problem.marginals[1].weights, np.zeros(self.shape[0])]

    def _features_dot(self, blocks):
        v, g = blocks
        return v[None, :] + g[:, None] * self.D

    def _first_moments(self, st):
        gam = st["p"] * self.mu_elim[:, None]
        return [gam.sum(axis=0), (gam * self.D).sum(axis=1)]

    def _hessian_full(self, st):
        p, D, mu = st["p"], self.D, self.mu_elim
        gam = p * mu[:, None]
        m1 = (p * D).sum(axis=1)
        Hvv = np.diag(gam.sum(axis=0)) - gam.T @ p
        Hgg = np.diag(mu * ((p * D * D).sum(axis=1) - m1 * m1))
        Hvg = (gam * (D - m1[:, None])).T  # (s, i)
        return np.block([[Hvv, Hvg], [Hvg.T, Hgg]])

    def _cov_with(self, st, f):
        p, D, mu = st["p"], self.D, self.mu_elim
        gam = p * mu[:, None]
        ef = (p * f).sum(axis=1)
        m1 = (p * D).sum(axis=1)
        cv = (gam * (f - ef[:, None])).sum(axis=0)
        cg = mu * ((p * D * f).sum(axis=1) - m1 * ef)
        return [cv, cg]

    def to_blocks(self, x, eps):
        v, g = self.unpack(x)
        return [self.eliminate(x, eps), v, g]

    def from_blocks(self, blocks):
        _, v, g = (np.array(b, dtype=float) for b in blocks)
        y = _x(self.problem, 1)
        g0 = g[0]
        g = g - g0
        v = v + g0 * y  # g₀(y − x) moves into v and the eliminated u
        v = v - v[0]
        return self.pack([v, g])


class MultiPeriodKernel(ReducedKernel):
    """Eliminates u (first marginal); retains v, w, g, h.

    Cell (i, s, t) carries v_s + w_t + g_i·(y_s − x_i) + h_is·(z_t − y_s).
    Gauge: v₀ = w₀ = g₀ = h₀₀ = 0.
    """

    family = "multi_period_martingale"
    elim = 0
    block_names = ("v", "w", "g", "h")

    def __init__(self, problem):
        x, y, z = (_x(problem, k) for k in range(3))
        self.D1 = (y[None, :] - x[:, None])  # (i, s)
        self.D2 = (z[None, :] - y[:, None])  # (s, t)
        super().__init__(problem)

    def _block_shapes(self):
        nx, ny, nz = self.shape
        return [(ny,), (nz,), (nx,), (nx, ny)]

    def _b_blocks(self):
        nx, ny, _ = self.shape
        m = self.problem.marginals
        return [m[1].weights, m[2].weights, np.zeros(nx), np.zeros((nx, ny))]

    def _features_dot(self, blocks):
        v, w, g, h = blocks
        return (v[None, :, None] + w[None, None, :]
                + (g[:, None] * self.D1)[:, :, None] + h[:, :, None] * self.D2[None])

    def _first_moments(self, st):
        gam = st["p"] * self.mu_elim[:, None, None]
        return [gam.sum(axis=(0, 2)), gam.sum(axis=(0, 1)),
                (gam.sum(axis=2) * self.D1).sum(axis=1),
                (gam * self.D2[None]).sum(axis=2)]

    def _moments(self, p):
        D1, D2 = self.D1, self.D2
        P = p.sum(axis=2)                      # (i, s)
        Q = p.sum(axis=1)                      # (i, t)
        m1 = (P * D1).sum(axis=1)              # (i,)
        M2 = (p * D2[None]).sum(axis=2)        # (i, s)
        return P, Q, m1, M2

    def _hessian_full(self, st):
        p, mu = st["p"], self.mu_elim
        D1, D2 = self.D1, self.D2
        nx, ny, nz = self.shape
        P, Q, m1, M2 = self._moments(p)
        muP, muQ = mu[:, None] * P, mu[:, None] * Q
        gam = p * mu[:, None, None]

        Hvv = np.diag(muP.sum(axis=0)) - muP.T @ P
        Hww = np.diag(muQ.sum(axis=0)) - muQ.T @ Q
        Hvw = gam.sum(axis=0) - muP.T @ Q
        Hvg = (muP * (D1 - m1[:, None])).T                          # (s, i)
        Hwg = (mu[:, None] * ((p * D1[:, :, None]).sum(axis=1) - Q * m1[:, None])).T  # (t, i)
        Hgg = np.diag(mu * ((P * D1 * D1).sum(axis=1) - m1 * m1))

        # h_(i,s) columns, flattened row-major as i*ny + s
        Hvh = np.zeros((ny, nx, ny))
        idx = np.arange(ny)
        Hvh[idx, :, idx] = (mu[:, None] * M2).T
        Hvh -= np.einsum("iS,is->Sis", muP, M2)
        Hwh = (gam * D2[None]).transpose(2, 0, 1) - np.einsum("it,is->tis", muQ, M2)
        Hgh = np.zeros((nx, nx, ny))
        ii = np.arange(nx)
        Hgh[ii, ii, :] = mu[:, None] * (D1 - m1[:, None]) * M2
        Hhh_blocks = -np.einsum("i,is,iS->isS", mu, M2, M2)
        diag = mu[:, None] * (p * D2[None] ** 2).sum(axis=2)        # (i, s)
        Hhh_blocks[:, idx, idx] += diag
        Hhh = np.zeros((nx * ny, nx * ny))
        for i in range(nx):
            sl = slice(i * ny, (i + 1) * ny)
            Hhh[sl, sl] = Hhh_blocks[i]

        Hvh = Hvh.reshape(ny, nx * ny)
        Hwh = Hwh.reshape(nz, nx * ny)
        Hgh = Hgh.reshape(nx, nx * ny)
        return np.block([
            [Hvv, Hvw, Hvg, Hvh],
            [Hvw.T, Hww, Hwg, Hwh],
            [Hvg.T, Hwg.T, Hgg, Hgh],
            [Hvh.T, Hwh.T, Hgh.T, Hhh],
        ])

    def _cov_with(self, st, f):
        p, mu = st["p"], self.mu_elim
        D1, D2 = self.D1, self.D2
        P, Q, m1, M2 = self._moments(p)
        pf = p * f
        ef = pf.sum(axis=(1, 2))                                     # (i,)
        cv = (mu[:, None] * (pf.sum(axis=2) - P * ef[:, None])).sum(axis=0)
        cw = (mu[:, None] * (pf.sum(axis=1) - Q * ef[:, None])).sum(axis=0)
        cg = mu * ((pf.sum(axis=2) * D1).sum(axis=1) - m1 * ef)
        ch = mu[:, None] * ((pf * D2[None]).sum(axis=2) - M2 * ef[:, None])
        return [cv, cw, cg, ch]

    def to_blocks(self, x, eps):
        v, w, g, h = self.unpack(x)
        return [self.eliminate(x, eps), v, w, g, h]

    def from_blocks(self, blocks):
        _, v, w, g, h = (np.array(b, dtype=float) for b in blocks)
        y, z = _x(self.problem, 1), _x(self.problem, 2)
        h00 = h[0, 0]
        h = h - h00          # h₀₀(z − y) moves into w and v
        w = w + h00 * z
        v = v - h00 * y
        g0 = g[0]
        g = g - g0           # g₀(y − x) moves into v and the eliminated u
        v = v + g0 * y
        v = v - v[0]
        w = w - w[0]
        return self.pack([v, w, g, h])


KERNELS = {
    "two_marginal": TwoMarginalKernel,
    "three_marginal": ThreeMarginalKernel,
    "martingale": MartingaleKernel,
    "multi_period_martingale": MultiPeriodKernel,
}


def reduced_objective(problem):
    """Reduced kernel for the problem's family tag."""
    try:
        cls = KERNELS[problem.family]
    except KeyError:
        raise ValueError(f"no reduced kernel for family {problem.family!r}") from None
    return cls(problem)
