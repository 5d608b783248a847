"""Entropic optimal transport curves by dual ODE continuation.

The optimal dual potentials of an entropically regularized transport problem
(with optional extra linear constraints such as martingale conditions) are
traced as a function of the cost scale ε by integrating an ODE from the
explicitly known solution at ε = 0. A generalized Sinkhorn solver serves as
baseline and reference.
"""

from otode.dual import GenericObjective, primal_value, transport_cost
from otode.errors import OTODEError
from otode.families import (check_convex_order, make_barycenter, make_geodesic,
                            make_martingale, make_multi_period, make_three_marginal,
                            make_two_marginal, table_problem)
from otode.kernels import BACKEND
from otode.ode import SolutionCurve, initial_potential, integrate, make_objective
from otode.problem import (ConstraintBasis, ConstraintGroup, CostPath, DiscreteMarginal,
                           LinearSystem, ProblemSpec, build_system, reduce_full_rank)
from otode.reduced import reduced_objective
from otode.sinkhorn import SinkhornConfig, dual_value_at_optimum, sinkhorn_solve

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConstraintBasis", "ConstraintGroup", "CostPath", "DiscreteMarginal",
    "GenericObjective", "LinearSystem", "OTODEError", "ProblemSpec", "SinkhornConfig",
    "SolutionCurve", "build_system", "check_convex_order", "dual_value_at_optimum",
    "initial_potential", "integrate", "make_barycenter", "make_geodesic",
    "make_martingale", "make_multi_period", "make_objective", "make_three_marginal",
    "make_two_marginal", "primal_value", "reduce_full_rank", "reduced_objective",
    "sinkhorn_solve", "table_problem", "transport_cost",
]
