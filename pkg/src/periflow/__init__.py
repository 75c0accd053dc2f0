"""Boundary-integral Stokes flow in smooth periodic channels.

Subpackages:

* :mod:`periflow.geometry` -- spectral curve discretization and channel shapes
* :mod:`periflow.kernels`  -- Stokes kernels and layer-potential assembly
* :mod:`periflow.linalg`   -- GMRES, interpolatory decomposition, pseudoinverse
* :mod:`periflow.periodize` -- extended linear system for the unit-cell flow
* :mod:`periflow.fds`      -- hierarchical fast direct solver for the walls
* :mod:`periflow.vesicle`  -- inextensible-membrane dynamics and time stepping
* :mod:`periflow.cli`      -- experiment driver
"""

__version__ = "0.1.0"

from .errors import (ConfigError, GeometryError, NearFieldError,
                     NumericalError, SingularityError)

__all__ = [
    "__version__",
    "ConfigError",
    "GeometryError",
    "NearFieldError",
    "NumericalError",
    "SingularityError",
]
