"""Backend selection for the hot loops.

The compiled extension ``otode._ckernels`` is used when it was built;
otherwise (or when ``OTODE_PURE_PYTHON=1`` is set) the numpy versions in
``otode._pykernels`` are used. Call sites go through the module-level
functions below so :func:`use_backend` can switch at runtime, which is what
the benchmark does.
"""

import os

import numpy as np

from otode import _pykernels

try:
    from otode import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_IMPLS = {"python": _pykernels}
if _ckernels is not None:
    _IMPLS["cython"] = _ckernels

if _ckernels is not None and not os.environ.get("OTODE_PURE_PYTHON"):
    BACKEND = "cython"
else:
    BACKEND = "python"
_impl = _IMPLS[BACKEND]


def available_backends():
    return sorted(_IMPLS)


def use_backend(name):
    """Switch kernel implementation; returns the previous backend name."""
    global _impl, BACKEND
    if name not in _IMPLS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    previous = BACKEND
    _impl, BACKEND = _IMPLS[name], name
    return previous


def logsumexp_keep(X, axis):
    """log of sum(exp(X)) over every axis except ``axis``.

    ``axis`` may be an int or a tuple of leading axes ``(0, ..., k)``; the
    result has the shape of the kept axes.
    """
    X = np.ascontiguousarray(X, dtype=float)
    if isinstance(axis, tuple):
        if axis != tuple(range(len(axis))):
            X = np.ascontiguousarray(np.moveaxis(X, axis, tuple(range(len(axis)))))
            axis = tuple(range(len(axis)))
        kept = X.shape[: len(axis)]
        X3 = X.reshape(1, int(np.prod(kept)), -1)
        return _impl.lse_mid(X3).reshape(kept)
    axis = axis % X.ndim
    before = int(np.prod(X.shape[:axis]))
    X3 = X.reshape(before, X.shape[axis], -1)
    return _impl.lse_mid(X3)


def root_rows(X, F, tol=1e-12, newton_max=50):
    """Per-row root of sum_j exp(X_ij + t_i F_ij) F_ij (see ``_ckernels``)."""
    X = np.ascontiguousarray(X, dtype=float)
    F = np.ascontiguousarray(F, dtype=float)
    return _impl.root_rows(X, F, tol, newton_max)
