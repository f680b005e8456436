"""Exception types shared across the package.

Every error raised by netmor derives from :class:`NetmorError`, so callers can
catch the whole family at the CLI boundary and map it to an exit code.
"""


class NetmorError(Exception):
    """Base class for all netmor errors."""


class DimensionMismatch(NetmorError):
    """Operands have incompatible input/output or state dimensions."""


class SingularResolvent(NetmorError):
    """(iw*I - A) is numerically singular at the requested frequency."""


class NotHurwitz(NetmorError):
    """A matrix required to be Hurwitz has eigenvalues outside the open LHP."""


class NotStable(NetmorError):
    """Operation requires an internally stable model."""


class NotWellPosed(NetmorError):
    """LFT feedback term I - D22*Dm is singular beyond threshold."""


class IndexOutOfRange(NetmorError):
    """Subsystem index outside 1..k."""


class SingularWeight(NetmorError):
    """Augmentation or scaling weight is singular or too ill-conditioned."""


class OrderOutOfRange(NetmorError):
    """Requested reduction order outside [0, n]."""


class NotPositiveDefinite(NetmorError):
    """Matrix required to be (semi)definite fails its definiteness check."""


class NotBistable(NetmorError):
    """Weight must be stable with a stable, proper inverse."""


class AssumptionViolated(NetmorError):
    """Standing stability/well-posedness assumption on the interconnection fails."""


class Infeasible(NetmorError):
    """No positive error budget satisfies the scaled inequality."""


class BudgetInfeasible(NetmorError):
    """The budget optimization for a robust reduction run is infeasible."""


class OrderExhausted(NetmorError):
    """No order up to full order meets the error budget."""

    def __init__(self, message, tightest_norm=None):
        super().__init__(message)
        self.tightest_norm = tightest_norm


class PointwiseIllPosed(NetmorError):
    """A sampled interconnection is singular at one frequency point."""


class NumericalFailure(NetmorError):
    """An iteration failed to converge or produced non-finite values."""


class ConfigError(NetmorError):
    """Run configuration is missing fields or fails validation."""


class MissingBudgets(NetmorError):
    """Study requested before a reduce run produced budget files."""


class ClosedLoopUnstableWarning(UserWarning):
    """Structure-preserving truncation produced an unstable closed loop."""
