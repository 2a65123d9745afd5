"""Exception hierarchy shared across the package."""


class NumericalError(RuntimeError):
    """A numerical procedure could not produce a trustworthy result."""


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap before reaching tolerance."""


class CompatibilityError(NumericalError, ValueError):
    """Right-hand side of a singular problem is not orthogonal to constants."""


class StepSizeError(NumericalError):
    """Time stepping needed more steps than allowed (stiff configuration)."""


class GridMismatchError(ValueError):
    pass


class EllipticityError(ValueError):
    pass
