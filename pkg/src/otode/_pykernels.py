"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def lse_mid(X):
    """log sum_{a, c} exp(X[a, b, c]) for every b."""
    m = X.max(axis=(0, 2))
    safe = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(X - safe[None, :, None]).sum(axis=(0, 2))
    with np.errstate(divide="ignore"):
        out = safe + np.log(s)
    out[m == -np.inf] = -np.inf
    return out


def _eval(X, F, t):
    Z = X + t[:, None] * F
    Z -= Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    EF = E * F
    return EF.sum(axis=1), (EF * F).sum(axis=1)


def root_rows(X, F, tol=1e-12, newton_max=50, bisect_max=200):
    """Solve sum_j exp(X[i, j] + t_i F[i, j]) F[i, j] = 0 for each row i.

    Vectorized over rows: every Newton step is taken on all unfinished rows
    at once, so the slowest row sets the iteration count.
    """
    X = np.asarray(X, dtype=float)
    F = np.asarray(F, dtype=float)
    n = X.shape[0]
    finite = np.isfinite(X)
    has_pos = ((F > 0) & finite).any(axis=1)
    has_neg = ((F < 0) & finite).any(axis=1)
    out = np.zeros(n)
    out[has_pos ^ has_neg] = np.nan
    rows = np.flatnonzero(has_pos & has_neg)
    if rows.size == 0:
        return out
    Xr, Fr = X[rows], F[rows]
    t = np.zeros(rows.size)
    lo = np.full(rows.size, -np.inf)
    hi = np.full(rows.size, np.inf)
    active = np.ones(rows.size, dtype=bool)
    for _ in range(newton_max):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        h, dh = _eval(Xr[idx], Fr[idx], t[idx])
        lo[idx] = np.where(h < 0, t[idx], lo[idx])
        hi[idx] = np.where(h > 0, t[idx], hi[idx])
        step = h / dh
        t_new = t[idx] - step
        conv = (np.abs(step) <= tol * (1.0 + np.abs(t[idx]))) | (h == 0)
        out_of = (t_new <= lo[idx]) | (t_new >= hi[idx])
        both = np.isfinite(lo[idx]) & np.isfinite(hi[idx])
        t_new = np.where(out_of & both & ~conv, 0.5 * (lo[idx] + hi[idx]), t_new)
        t[idx] = np.where(h == 0, t[idx], t_new)
        active[idx[conv]] = False
    for i in np.flatnonzero(active):
        t[i] = _bisect_row(Xr[i], Fr[i], lo[i], hi[i], tol, bisect_max)
    out[rows] = t
    return out


def _bisect_row(x, f, lo, hi, tol, bisect_max):
    def h(t):
        z = x + t * f
        return (np.exp(z - z.max()) * f).sum()

    width = 1.0
    while not np.isfinite(lo):
        if h(hi - width) < 0:
            lo = hi - width
        else:
            hi, width = hi - width, 2 * width
    while not np.isfinite(hi):
        if h(lo + width) > 0:
            hi = lo + width
        else:
            lo, width = lo + width, 2 * width
    for _ in range(bisect_max):
        mid = 0.5 * (lo + hi)
        if h(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * (1.0 + abs(mid)):
            break
    return 0.5 * (lo + hi)
