"""Exception types shared across the package.

Every refusal has a dedicated class so callers (and the batch runner) can
distinguish "the check refused to run" from "the check ran and failed".
"""


class WienerOtError(Exception):
    """Base class for all package errors."""


# --- measures and grids ---

class NonIntegrable(WienerOtError):
    """Density integral against the Gaussian reference is zero, negative, or not finite."""


class NotNormalized(WienerOtError):
    """Operation requires a normalized density (integral 1 within tolerance)."""


class DimensionMismatch(WienerOtError):
    """Inputs live in different dimensions."""


class UnsupportedOrder(WienerOtError):
    """Requested derivative order is not available for this density family."""


class ResolutionTooSmall(WienerOtError):
    """Grid resolution below the minimum of 2."""


class DimensionTooLarge(WienerOtError):
    """Tensor grid would exceed the dimension or node-count cap."""


# --- transport solvers ---

class ZeroDensityRegion(WienerOtError):
    """CDF is flat inside the requested inversion region; quantile map ill-defined."""


class NotSPD(WienerOtError):
    """Matrix expected to be symmetric positive-definite is not."""


class NotSeparable(WienerOtError):
    """Operation requires coordinatewise-separable densities."""


class AllZeroMass(WienerOtError):
    """Discretization produced no positive mass."""


class UnusableState(WienerOtError):
    """Sinkhorn state too far from feasibility to extract potentials."""


class InsufficientPoints(WienerOtError):
    """Extrapolation needs at least three distinct regularization values."""


# --- operator calculus ---

class GridNotUniform(WienerOtError):
    """Finite differences require a truncated-uniform mesh."""


class NonInvertibleJacobian(WienerOtError):
    """det(I + Hessian) is not positive where invertibility is required."""


class ExtrapolationOutsideMesh(WienerOtError):
    """A map sends every interior node outside the tabulation mesh."""


# --- approximation cascade ---

class DegenerateCutoff(WienerOtError):
    """Cutoff normalization mass below threshold."""


class ConvexityNotCertified(WienerOtError):
    """Convexity certificate required by a bound checker is not available; the check refuses."""


class StageFailed(WienerOtError):
    """A cascade stage failed; carries the stage index."""

    def __init__(self, stage_index: int, message: str):
        super().__init__(f"stage {stage_index}: {message}")
        self.stage_index = stage_index


# --- inequalities ---

class DegenerateVariance(WienerOtError):
    """Rayleigh quotient undefined: test function has (numerically) zero variance."""


# --- runner / CLI ---

class ConfigInvalid(WienerOtError):
    """Experiment config failed to parse or validate."""


class JobFailed(WienerOtError):
    """A batch job raised; the run continues but exits nonzero."""


class ManifestMissing(WienerOtError):
    """Run directory has no manifest."""


class NoApplicableMethod(WienerOtError):
    """No requested solver method applies to the given pair."""
