"""Discrete W-Sobolev calculus, generalized elliptic difference equations,
homogenization studies and the exclusion process with conductances."""

from .elliptic import (
    DiagonalField,
    DualFunctional,
    apply_T_lambda,
    bilinear_form,
    dual_apply,
    dual_canonicalize,
    dual_norm,
    solve_poisson,
    solve_resolvent,
)
from .errors import (
    CompatibilityError,
    ConvergenceError,
    EllipticityError,
    GridMismatchError,
    NumericalError,
    StepSizeError,
)
from .mesh import MeshFunction, TorusGrid
from .weights import WCoordinate, WProduct

__version__ = "0.1.0"

__all__ = [
    "CompatibilityError",
    "ConvergenceError",
    "DiagonalField",
    "DualFunctional",
    "EllipticityError",
    "GridMismatchError",
    "MeshFunction",
    "NumericalError",
    "StepSizeError",
    "TorusGrid",
    "WCoordinate",
    "WProduct",
    "apply_T_lambda",
    "bilinear_form",
    "dual_apply",
    "dual_canonicalize",
    "dual_norm",
    "solve_poisson",
    "solve_resolvent",
    "__version__",
]
