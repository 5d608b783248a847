"""Exception types. All derive from ``OTODEError`` (a ``ValueError``)."""


class OTODEError(ValueError):
    pass


class InconsistentBasisError(OTODEError):
    def __init__(self, detail=""):
        super().__init__("inconsistent basis" + (f": {detail}" if detail else ""))


class InfeasibleConstraintError(OTODEError):
    def __init__(self, detail=""):
        msg = "constraint inconsistent with marginals"
        super().__init__(msg + (f": {detail}" if detail else ""))


class ObjectiveOverflowError(OTODEError, ArithmeticError):
    def __init__(self, eps):
        self.eps = eps
        super().__init__(f"objective overflow at ε={eps!r}")


class HessianIndefiniteError(OTODEError):
    def __init__(self, detail=""):
        super().__init__("Hessian indefinite (numerical)" + (f": {detail}" if detail else ""))


class ODEStalledError(OTODEError):
    def __init__(self, eps, detail=""):
        self.eps = eps
        super().__init__(f"ODE stalled at ε={eps!r}" + (f": {detail}" if detail else ""))


class InitialConditionError(OTODEError):
    def __init__(self, detail=""):
        super().__init__("initial condition failed" + (f": {detail}" if detail else ""))


class ConvexOrderError(OTODEError):
    def __init__(self, detail=""):
        msg = "infeasible: μ not dominated in convex order"
        super().__init__(msg + (f" ({detail})" if detail else ""))


class ConvexOrderUnsupported(OTODEError):
    def __init__(self):
        super().__init__("convex-order check unsupported in d>1")


class EnvelopePreconditionError(OTODEError):
    def __init__(self, residual):
        self.residual = residual
        super().__init__(f"envelope precondition violated (gradient residual {residual:.3e})")


class ClosedFormScopeError(OTODEError):
    def __init__(self):
        super().__init__("closed form valid only for unconstrained two-marginal")


class InvalidWeightPathError(OTODEError):
    def __init__(self, eps, detail=""):
        self.eps = eps
        super().__init__(f"invalid weight path at ε={eps!r}" + (f": {detail}" if detail else ""))


class SchemaError(OTODEError):
    """Problem file does not match the input schema; ``field`` is a JSON path."""

    def __init__(self, field, detail, line=None):
        self.field = field
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"schema error at {field}{where}: {detail}")
