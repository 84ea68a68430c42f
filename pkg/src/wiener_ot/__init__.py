"""Numerical laboratory for Monge transport potentials between
Gaussian-weighted measures on ℝⁿ.

Subsystems:

* :mod:`wiener_ot.grids` / :mod:`wiener_ot.densities` — quadrature against the
  Gaussian reference and potential-first density families.
* :mod:`wiener_ot.oracles` — exact transport solvers (1-D quantile,
  Gaussian/affine, separable products).
* :mod:`wiener_ot.entropic` — log-domain Sinkhorn with ε-extrapolation.
* :mod:`wiener_ot.calculus` — finite-difference and semigroup operators with
  residual checkers for the transport identities.
* :mod:`wiener_ot.cascade` — density approximation operators and the
  regularity-bound checker.
* :mod:`wiener_ot.inequalities` — Talagrand / Poincaré / log-Sobolev suite.
* :mod:`wiener_ot.runner` / :mod:`wiener_ot.cli` — config-driven batch runs.
"""

__version__ = "0.1.0"

from . import calculus, errors
from .grids import QuadratureGrid, build_grid, integrate
from .densities import (
    ConvexityCertificate,
    MixtureLogPotential,
    PotentialDensity,
    QuadraticPotential,
    SeparablePotential,
    TabulatedPotential,
    convexity_modulus,
    evaluate,
    fisher_information,
    gaussian_potential,
    normalize,
    relative_entropy,
    standard_gaussian,
)

__all__ = [
    "calculus",
    "errors",
    "QuadratureGrid",
    "build_grid",
    "integrate",
    "ConvexityCertificate",
    "MixtureLogPotential",
    "PotentialDensity",
    "QuadraticPotential",
    "SeparablePotential",
    "TabulatedPotential",
    "convexity_modulus",
    "evaluate",
    "fisher_information",
    "gaussian_potential",
    "normalize",
    "relative_entropy",
    "standard_gaussian",
    "__version__",
]
