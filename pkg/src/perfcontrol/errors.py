"""Exception hierarchy shared by all modules."""


class PerfControlError(Exception):
    """Base class for every error raised by the package."""


class DomainSpecError(PerfControlError, ValueError):
    """Invalid perforated-domain parameters."""


class LayoutError(PerfControlError, ValueError):
    """Patches or control zone violate a disjointness requirement."""


class ExponentError(PerfControlError, ValueError):
    """Invalid exponent or threshold arguments."""


class PathBlocked(PerfControlError):
    """Every candidate center path meets the closed control zone."""


class FitResidualTooLarge(PerfControlError):
    """Charge fit could not match the Neumann data within tolerance."""


class SolvabilityViolation(PerfControlError):
    """Normal data keeps a nonzero mean after projection."""


class CoveringGap(PerfControlError):
    """Knot intervals do not cover the unit time interval."""


class MeanNotZero(PerfControlError):
    """Divergence datum does not integrate to zero."""


class SupportViolation(PerfControlError):
    """Datum is not supported inside the control zone."""


class NonSPDMatrix(PerfControlError, ValueError):
    """Matrix is not symmetric positive definite."""


class SolverDiverged(PerfControlError):
    """Iterative solver failed to converge."""


class BoxTooSmall(PerfControlError):
    """Truncated exterior problem is sensitive to the box size."""


class LengthscaleOutOfRange(PerfControlError, ValueError):
    """Intermediate corrector lengthscale outside [eps^alpha, eps]."""


class CFLViolation(PerfControlError):
    """Requested time step exceeds the advective stability bound."""


class NaNDetected(PerfControlError):
    """Non-finite values appeared in the solution."""


class UnresolvedHoles(PerfControlError):
    """Grid spacing too coarse for the hole radius."""


class FieldGapped(PerfControlError):
    """Snapshot sequence does not cover the requested time interval."""


class IOFailure(PerfControlError, OSError):
    """Reading or writing an artifact failed."""


class FormatError(PerfControlError, ValueError):
    """Artifact file has an unexpected header or layout."""
