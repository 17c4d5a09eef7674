"""Finite-volume homogenization toolkit for Poisson-reversible particle systems.

Cell problems for the bulk diffusion matrix, homogenized PDE objects, a reversible
particle chain for fluctuation fields, and localized Green-Kubo quantities.
"""
__version__ = "0.1.0"

from ._accel import backend, set_backend  # noqa: F401
from .core import (CoefficientModel, Configuration, Domain, RandomStream,  # noqa: F401
                   ValidationError, sample_poisson)
