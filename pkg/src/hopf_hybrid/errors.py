"""Exception types raised across the package."""


class HopfHybridError(Exception):
    """Base class for all package errors."""


class MissingBranch(HopfHybridError):
    """No normal-form LCO with the requested stability exists at a parameter value."""


class NonStarShaped(HopfHybridError):
    """A planar orbit has no unique angular parameterisation about its center."""


class RankDeficient(HopfHybridError):
    """Fourier least-squares design matrix is too ill-conditioned."""


class HarmonicMismatch(HopfHybridError):
    """Descriptors with different harmonic counts were compared."""


class NoConvergence(HopfHybridError):
    """An iterative solver failed to converge."""


class SingularJacobian(HopfHybridError):
    """A Jacobian became (numerically) singular during a Newton solve."""


class NonPositiveSpeed(HopfHybridError):
    """The oscillation-speed model produced a non-positive angular rate."""


class IntegrationError(HopfHybridError):
    """A time integration produced non-finite values."""


class OptimizerAbort(HopfHybridError):
    """An optimizer hit a non-finite objective or gradient."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class NoLco(HopfHybridError):
    """Simulated response decayed to the equilibrium."""


class NotSettled(HopfHybridError):
    """Simulated response still drifting after the settle time."""


class NotStabilized(HopfHybridError):
    """Feedback control failed to stabilize the target orbit."""


class Invasive(HopfHybridError):
    """Feedback control did not vanish on the stabilized orbit."""
