"""JSON problem files.

Layout::

    {
      "marginals": [{"points": [...], "weights": [...], "free": false}, ...],
      "cost": {"kind": "table", "base": [...], "slope": [...]}
            | {"kind": "expr", "name": "quadratic"},
      "constraints": {"kind": "none" | "martingale"
                              | "multi_period_martingale" | "custom",
                      "vectors": [[...], ...]},
      "eta": 0.002,
      "steps": 100, "eps_max": 1.0,                      (optional)
      "reference": {"value": v, "entropy": H}            (optional)
    }

``reference`` describes a known unregularized optimum: its value v and the
relative entropy H of the optimal coupling, giving the interval
[v, v + ηH] that must contain the regularized value. ``{"lower": a,
"upper": b}`` gives the interval directly.

A marginal may be written ``{"uniform": [lo, hi, n]}`` instead of listing
points. Tables and constraint vectors are flat in row-major grid order.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from otode import families
from otode.errors import OTODEError, SchemaError
from otode.problem import ConstraintBasis, CostPath, DiscreteMarginal, ProblemSpec

CONSTRAINT_KINDS = ("none", "martingale", "multi_period_martingale", "custom")
EXPR_NAMES = tuple(families.NAMED_COSTS) + ("geodesic", "barycenter")


class _Doc:
    """Keeps the raw text so field errors can point at a line."""

    def __init__(self, text):
        self.text = text

    def line_of(self, key):
        if not key:
            return None
        needle = f'"{key}"'
        pos = self.text.find(needle)
        return self.text.count("\n", 0, pos) + 1 if pos >= 0 else None

    def fail(self, path, detail, key=None):
        raise SchemaError(path, detail, self.line_of(key or path.split(".")[-1].split("[")[0]))


def _num(doc, obj, key, path, positive=False, required=True, default=None):
    if key not in obj:
        if required:
            doc.fail(f"{path}.{key}", "missing", key)
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        doc.fail(f"{path}.{key}", f"expected a number, got {type(v).__name__}", key)
    if positive and not v > 0:
        doc.fail(f"{path}.{key}", "must be positive", key)
    return float(v)


def _array(doc, v, path, key, length=None):
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        doc.fail(path, "expected a numeric array", key)
    if length is not None and a.size != length:
        doc.fail(path, f"expected {length} entries, got {a.size}", key)
    if not np.all(np.isfinite(a)):
        doc.fail(path, "non-finite entries", key)
    return a


def _marginal(doc, entry, i):
    path = f"marginals[{i}]"
    if not isinstance(entry, dict):
        doc.fail(path, "expected an object", "marginals")
    free = entry.get("free", False)
    if not isinstance(free, bool):
        doc.fail(f"{path}.free", "expected true/false", "free")
    try:
        if "uniform" in entry:
            lo, hi, n = entry["uniform"]
            return DiscreteMarginal.uniform(float(lo), float(hi), int(n)), free
        if "points" not in entry:
            doc.fail(f"{path}.points", "missing", "points")
        pts = _array(doc, entry["points"], f"{path}.points", "points")
        w = entry.get("weights")
        if free and w is not None:
            doc.fail(f"{path}.weights", "free marginals take no weights", "weights")
        w = None if w is None else _array(doc, w, f"{path}.weights", "weights", len(pts))
        return DiscreteMarginal(pts, w), free
    except SchemaError:
        raise
    except (ValueError, TypeError) as exc:
        doc.fail(path, str(exc), "marginals")


def parse_problem(data, text=None):
    """Build a ProblemSpec from decoded JSON.

    Returns
    -------
    problem : ProblemSpec
    options : dict
        ``steps``, ``eps_max`` and ``reference`` (None when absent).
    """
    doc = _Doc(text if text is not None else json.dumps(data, indent=1))
    if not isinstance(data, dict):
        doc.fail("$", "top level must be an object")
    for key in ("marginals", "cost", "eta"):
        if key not in data:
            doc.fail(key, "missing", key)
    eta = _num(doc, data, "eta", "$", positive=True)
    raw_m = data["marginals"]
    if not isinstance(raw_m, list) or not raw_m:
        doc.fail("marginals", "expected a non-empty list", "marginals")
    parsed = [_marginal(doc, m, i) for i, m in enumerate(raw_m)]
    margs = [m for m, _ in parsed]
    free = tuple(f for _, f in parsed)
    if all(free):
        doc.fail("marginals", "at least one marginal must be constrained", "marginals")
    shape = tuple(m.size for m in margs)
    m_total = int(np.prod(shape))

    cons = data.get("constraints", {"kind": "none"})
    if not isinstance(cons, dict) or cons.get("kind", "none") not in CONSTRAINT_KINDS:
        doc.fail("constraints.kind", f"expected one of {CONSTRAINT_KINDS}", "kind")
    ckind = cons.get("kind", "none")

    cost = data["cost"]
    if not isinstance(cost, dict) or cost.get("kind") not in ("table", "expr"):
        doc.fail("cost.kind", "expected 'table' or 'expr'", "cost")
    try:
        problem = _build(doc, data, cost, ckind, cons, margs, free, shape, m_total, eta)
    except SchemaError:
        raise
    except OTODEError:
        raise
    except ValueError as exc:
        doc.fail("$", str(exc))

    options = {
        "steps": int(_num(doc, data, "steps", "$", positive=True, required=False, default=100)),
        "eps_max": _num(doc, data, "eps_max", "$", positive=True, required=False, default=1.0),
        "reference": _reference(doc, data.get("reference"), eta),
    }
    return problem, options


def _build(doc, data, cost, ckind, cons, margs, free, shape, m_total, eta):
    if cost["kind"] == "expr":
        name = cost.get("name")
        if name not in EXPR_NAMES:
            doc.fail("cost.name", f"expected one of {EXPR_NAMES}", "name")
        if name == "geodesic":
            if len(margs) != 3 or free != (False, True, False) or ckind != "none":
                doc.fail("cost.name", "geodesic needs marginals (x1, free z, x2), no constraints",
                         "name")
            return families.make_geodesic(margs[0], margs[2], margs[1], eta)
        if name == "barycenter":
            if not free[-1] or any(free[:-1]) or ckind != "none":
                doc.fail("cost.name", "barycenter needs constrained marginals then a free z",
                         "name")
            return families.make_barycenter(margs[:-1], margs[-1], eta=eta)
        fn = families.NAMED_COSTS[name]
        nargs = fn.__code__.co_argcount
        if nargs != len(margs):
            doc.fail("cost.name", f"{name} takes {nargs} marginals, got {len(margs)}", "name")
        table = families._table(fn, margs)
    else:
        base = cost.get("base")
        slope = cost.get("slope")
        if base is None and slope is None:
            doc.fail("cost.slope", "a table cost needs 'slope' and/or 'base'", "slope")
        table = None
        base = None if base is None else _array(doc, base, "cost.base", "base", m_total)
        slope = None if slope is None else _array(doc, slope, "cost.slope", "slope", m_total)

    if ckind == "martingale":
        if len(margs) != 2 or any(free):
            doc.fail("constraints.kind", "martingale needs two constrained marginals", "kind")
        ctor = lambda c: families.make_martingale(margs[0], margs[1], c, eta)
    elif ckind == "multi_period_martingale":
        if len(margs) != 3 or any(free):
            doc.fail("constraints.kind", "multi-period needs three constrained marginals", "kind")
        ctor = lambda c: families.make_multi_period(margs[0], margs[1], margs[2], c, eta)
    elif ckind == "none" and not any(free) and len(margs) == 2:
        ctor = lambda c: families.make_two_marginal(margs[0], margs[1], c, eta)
    elif ckind == "none" and not any(free) and len(margs) == 3:
        ctor = lambda c: families.make_three_marginal(margs, c, eta)
    else:
        ctor = None

    if ctor is not None and (table is not None or (base is None)):
        return ctor(table if table is not None else slope.reshape(shape))

    if table is not None:
        path = CostPath.scaled(table)
    else:
        path = CostPath(base, slope)
    basis = ConstraintBasis()
    if ckind == "custom":
        vecs = cons.get("vectors")
        if not isinstance(vecs, list) or not vecs:
            doc.fail("constraints.vectors", "custom constraints need a list of vectors", "vectors")
        vecs = [_array(doc, v, f"constraints.vectors[{j}]", "vectors", m_total)
                for j, v in enumerate(vecs)]
        basis = ConstraintBasis.from_vectors(vecs)
    elif ckind != "none":
        # family constraints with a general base cost: reuse the family basis
        fam = ctor(np.zeros(shape))
        basis = fam.basis
    return ProblemSpec(margs, path, eta, free=free, basis=basis, family="custom")


def _reference(doc, ref, eta):
    if ref is None:
        return None
    if not isinstance(ref, dict):
        doc.fail("reference", "expected an object", "reference")
    if "lower" in ref and "upper" in ref:
        lo = _num(doc, ref, "lower", "reference")
        hi = _num(doc, ref, "upper", "reference")
    else:
        lo = _num(doc, ref, "value", "reference")
        hi = lo + eta * _num(doc, ref, "entropy", "reference")
    if hi < lo:
        doc.fail("reference", "upper bound below lower bound", "reference")
    return {"lower": lo, "upper": hi}


def load_problem(path):
    """Read and validate a problem file; see :func:`parse_problem`."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", exc.msg, exc.lineno) from None
    return parse_problem(data, text)


def load_builtin(name):
    """One of the bundled files ``table1`` ... ``table5``."""
    try:
        text = resources.files("otode").joinpath("data", f"{name}.json").read_text("utf-8")
    except FileNotFoundError:
        raise ValueError(f"unknown built-in problem {name!r}") from None
    return parse_problem(json.loads(text), text)
