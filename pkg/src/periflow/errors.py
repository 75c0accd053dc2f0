"""Exception types shared across the package."""


class GeometryError(ValueError):
    """Invalid or degenerate geometry (intersecting walls, vanishing speed)."""


class SingularityError(ValueError):
    """Kernel evaluated at (numerically) coincident source and target."""


class NearFieldError(ValueError):
    """Evaluation target violates the minimum-distance guard of a curve."""


class NumericalError(RuntimeError):
    """A solve failed: singular factorization or non-convergent iteration."""


class ConfigError(ValueError):
    """Invalid run configuration."""
