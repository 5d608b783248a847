"""Command-line front end.

Subcommands share the flags ``--input/--builtin``, ``--out``, ``--eta``,
``--steps``, ``--tol``, ``--polish-every``, ``--final-tol``, ``--snapshots``
and ``--seed``.
Exit status: 0 on success, 2 for an invalid problem file, 3 when a solver
fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from otode import derivatives, families
from otode.dual import primal_value, transport_cost
from otode.errors import OTODEError, SchemaError
from otode.ode import integrate, make_objective
from otode.problem import DiscreteMarginal
from otode.schema import load_builtin, load_problem
from otode.sinkhorn import SinkhornConfig, coupling_from_blocks, sinkhorn_solve

log = logging.getLogger("otode")

SUBCOMMANDS = ("solve-ode", "solve-sinkhorn", "curve", "derivs", "compare",
               "geodesic", "barycenter")
EXIT_OK, EXIT_SCHEMA, EXIT_SOLVER = 0, 2, 3


@dataclass
class RunConfig:
    subcommand: str
    input: Optional[str] = None
    builtin: Optional[str] = None
    out: str = "out"
    eta: Optional[float] = None
    steps: Optional[int] = None
    eps_max: Optional[float] = None
    tol: float = 1e-6
    polish_every: int = 0
    final_tol: Optional[float] = None
    snapshots: int = 16
    seed: int = 0
    generic: bool = False

    def __post_init__(self):
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.final_tol is not None and not self.final_tol > 0:
            raise ValueError("final tolerance must be positive")


def _fmt(v):
    return f"{v:.17g}"


# -- problem loading --------------------------------------------------------------

def random_two_marginal(seed, n1=5, n2=4, eta=0.5):
    """Seeded random unconstrained instance (used by ``derivs``)."""
    rng = np.random.default_rng(seed)
    w1, w2 = rng.uniform(0.2, 1.0, n1), rng.uniform(0.2, 1.0, n2)
    mu = DiscreteMarginal(np.sort(rng.normal(size=n1)), w1 / w1.sum())
    nu = DiscreteMarginal(np.sort(rng.normal(size=n2)), w2 / w2.sum())
    return families.make_two_marginal(mu, nu, rng.normal(size=(n1, n2)), eta)


def _gauss_on_grid(z, m, s):
    w = np.exp(-0.5 * ((z - m) / s) ** 2)
    return DiscreteMarginal(z, w / w.sum())


def demo_geodesic(eta=0.01):
    z = np.linspace(-1, 1, 41)
    x = np.linspace(-1, 1, 25)
    return families.make_geodesic(_gauss_on_grid(x, -0.4, 0.15), _gauss_on_grid(x, 0.4, 0.2),
                                  z, eta)


def demo_barycenter(eta=0.01):
    z = np.linspace(-1, 1, 31)
    x = np.linspace(-1, 1, 15)
    margs = [_gauss_on_grid(x, -0.5, 0.15), _gauss_on_grid(x, 0.0, 0.2),
             _gauss_on_grid(x, 0.5, 0.15)]
    return families.make_barycenter(margs, z, eta=eta)


def _load(cfg):
    opts = {"steps": 100, "eps_max": 1.0, "reference": None}
    if cfg.input:
        problem, opts = load_problem(cfg.input)
    elif cfg.builtin in ("table1", "table2", "table3", "table4", "table5"):
        problem, opts = load_builtin(cfg.builtin)
    elif cfg.builtin == "random":
        problem = random_two_marginal(cfg.seed)
    elif cfg.builtin == "geodesic":
        problem = demo_geodesic()
    elif cfg.builtin == "barycenter":
        problem = demo_barycenter()
    else:
        raise SchemaError("--input", "give --input PATH or --builtin NAME")
    if cfg.eta is not None:
        problem = replace(problem, eta=cfg.eta)
    if cfg.steps is not None:
        opts["steps"] = cfg.steps
    if cfg.eps_max is not None:
        opts["eps_max"] = cfg.eps_max
    return problem, opts


# -- writers ----------------------------------------------------------------------

def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "dual_value", "primal_value", "grad_inf_norm"])
        for s in curve.samples:
            w.writerow([_fmt(s.eps), _fmt(s.dual_value), _fmt(s.primal_value),
                        _fmt(s.grad_inf_norm)])


def write_coupling(path, gamma):
    g = np.asarray(gamma)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["flat_index", "multi_index", "gamma"])
        idx = np.unravel_index(np.arange(g.size), g.shape)
        for flat, (multi, val) in enumerate(zip(zip(*idx), g.ravel())):
            w.writerow([flat, ";".join(map(str, multi)), _fmt(val)])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_snapshots(out, curve):
    names = []
    for k, s in curve.snapshots():
        name = f"coupling_{k}.csv"
        write_coupling(out / name, s.coupling)
        names.append(name)
    return names


# -- subcommands -------------------------------------------------------------------

def _ode(problem, opts, cfg, record=True):
    return integrate(problem, steps=opts["steps"], eps_max=opts["eps_max"],
                     record_couplings=record, snapshots=cfg.snapshots,
                     polish_every=cfg.polish_every, generic=cfg.generic,
                     final_tol=cfg.final_tol)


def _ode_section(curve):
    f = curve.final
    return {"value": f.primal_value, "transport_cost": f.transport_cost,
            "dual_value": f.dual_value, "grad_inf_norm": f.grad_inf_norm,
            "steps": curve.steps, "eps": f.eps, "wall_ms": curve.wall_ms,
            "formulation": curve.family, "jitter_retries": curve.stats.jitter_retries,
            "newton_steps": curve.stats.polish_steps}


def _sinkhorn(problem, opts, cfg):
    eps = opts["eps_max"]
    t0 = time.perf_counter()
    res = sinkhorn_solve(problem, eps, SinkhornConfig(tol=cfg.tol))
    wall = 1e3 * (time.perf_counter() - t0)
    gam = coupling_from_blocks(problem, eps, res.blocks)
    flat = gam.ravel()
    section = {"value": primal_value(problem.cost, problem.eta, eps, flat, problem.log_ref),
               "transport_cost": transport_cost(problem.cost, eps, flat),
               "dual_value": res.value, "iterations": res.iterations,
               "residual": res.residual, "converged": res.converged, "wall_ms": wall}
    return section, gam


def _bracket(opts):
    ref = opts.get("reference")
    return {"lower": ref["lower"], "upper": ref["upper"]} if ref else None


def cmd_solve_ode(problem, opts, cfg, out):
    curve = _ode(problem, opts, cfg)
    write_curve(out / "curve.csv", curve)
    files = _write_snapshots(out, curve)
    _write_json(out / "report.json", {"ode": _ode_section(curve), "sinkhorn": None,
                                      "bracket": _bracket(opts), "couplings": files})


cmd_curve = cmd_solve_ode


def cmd_solve_sinkhorn(problem, opts, cfg, out):
    section, gam = _sinkhorn(problem, opts, cfg)
    write_coupling(out / "coupling_final.csv", gam)
    _write_json(out / "report.json", {"ode": None, "sinkhorn": section,
                                      "bracket": _bracket(opts)})
    if not section["converged"]:
        raise OTODEError(f"sinkhorn not converged (residual {section['residual']:.3e})")


def cmd_compare(problem, opts, cfg, out):
    curve = _ode(problem, opts, cfg, record=False)
    write_curve(out / "curve.csv", curve)
    sk, _ = _sinkhorn(problem, opts, cfg)
    report = {"ode": _ode_section(curve), "sinkhorn": sk, "bracket": _bracket(opts)}
    br = report["bracket"]
    if br:
        report["inside_bracket"] = {
            k: bool(br["lower"] <= report[k]["value"] <= br["upper"]) for k in ("ode", "sinkhorn")}
    _write_json(out / "report.json", report)
    for k in ("ode", "sinkhorn"):
        print(f"{k:9s} value={report[k]['value']:.6f} "
              f"transport_cost={report[k]['transport_cost']:.6f}")


def cmd_derivs(problem, opts, cfg, out):
    zero = derivatives.report_zero(problem)
    fd = derivatives.c_second_fd(problem)
    eps = opts["eps_max"]
    res = sinkhorn_solve(problem, eps, SinkhornConfig(tol=1e-13, max_iters=500_000))
    obj = make_objective(problem)
    along = derivatives.report_along_curve(problem, obj.from_blocks(res.blocks), eps)
    rel = abs(fd - zero.c_second) / max(abs(zero.c_second), 1e-300)
    _write_json(out / "derivs.json", {
        "closed_form_zero": zero.to_dict(),
        "finite_difference": {"eps": 0.0, "c_second": fd, "h": 1e-2,
                              "method": "finite_difference"},
        "along_curve": along.to_dict(),
        "relative_error_c_second_zero": rel,
    })
    print(f"C''(0) closed form {zero.c_second:.10g}, finite difference {fd:.10g}")


def _interp(problem, opts, cfg, out, family):
    if problem.family != family:
        raise SchemaError("cost.name", f"the {family} subcommand needs a {family} problem")
    curve = _ode(problem, opts, cfg)
    write_curve(out / "curve.csv", curve)
    files = _write_snapshots(out, curve)
    zpts = problem.marginals[problem.meta["z_axis"]].points[:, 0]
    with open(out / "zmarginal.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "z_index", "z", "mass"])
        for _, s in curve.snapshots():
            zm = families.z_marginal(problem, s.coupling)
            for j, (zz, mass) in enumerate(zip(zpts, zm)):
                w.writerow([_fmt(s.eps), j, _fmt(zz), _fmt(mass)])
    _write_json(out / "report.json", {"ode": _ode_section(curve), "sinkhorn": None,
                                      "bracket": None, "couplings": files})


def cmd_geodesic(problem, opts, cfg, out):
    _interp(problem, opts, cfg, out, "geodesic")


def cmd_barycenter(problem, opts, cfg, out):
    _interp(problem, opts, cfg, out, "barycenter")


COMMANDS = {
    "solve-ode": cmd_solve_ode, "solve-sinkhorn": cmd_solve_sinkhorn, "curve": cmd_curve,
    "derivs": cmd_derivs, "compare": cmd_compare, "geodesic": cmd_geodesic,
    "barycenter": cmd_barycenter,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="otode", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--input", metavar="PATH")
        src.add_argument("--builtin", metavar="NAME",
                         help="table1..table5, random, geodesic or barycenter")
        p.add_argument("--out", metavar="DIR", default="out")
        p.add_argument("--eta", type=float)
        p.add_argument("--steps", type=int)
        p.add_argument("--eps-max", type=float)
        p.add_argument("--tol", type=float, default=1e-6, help="Sinkhorn residual tolerance")
        p.add_argument("--polish-every", type=int, default=0, metavar="N")
        p.add_argument("--final-tol", type=float, metavar="TOL",
                       help="refine the ODE endpoint by Newton to this gradient norm")
        p.add_argument("--snapshots", type=int, default=16, metavar="N")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--generic", action="store_true",
                       help="integrate the generic objective instead of the reduced one")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    try:
        problem, opts = _load(cfg)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[cfg.subcommand](problem, opts, cfg, out)
    except SchemaError as exc:
        print(f"otode: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (OTODEError, ArithmeticError, np.linalg.LinAlgError) as exc:
        fam = locals().get("problem")
        fam = getattr(fam, "family", "?")
        eps = getattr(exc, "eps", None)
        where = f" [family={fam}" + (f", eps={eps}]" if eps is not None else "]")
        print(f"otode: solver failure{where}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig(args.subcommand, args.input, args.builtin, args.out, args.eta,
                        args.steps, args.eps_max, args.tol, args.polish_every,
                        args.final_tol, args.snapshots, args.seed, args.generic)
    except ValueError as exc:
        print(f"otode: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
