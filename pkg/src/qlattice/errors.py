"""Exception and warning classes raised across the package."""


class QLatticeError(Exception):
    """Base class for all package errors."""


class LimitError(QLatticeError):
    """A numerical size limit (dense limit, window size, term budget) was hit."""


class SupportTooLarge(LimitError):
    pass


class WindowTooLarge(LimitError):
    pass


class RingTooLarge(LimitError):
    pass


class TermBudgetExceeded(LimitError):
    pass


class ArityTooLarge(LimitError):
    pass


class SupportOutsideWindow(QLatticeError):
    pass


class StepSizeRejected(QLatticeError):
    pass


class FitDegenerate(QLatticeError):
    pass


class IncompleteTable(QLatticeError):
    pass


class WavenumberMismatch(QLatticeError):
    pass


class ModelInvalid(QLatticeError):
    pass


class DivergenceSplitFailed(QLatticeError):
    pass


class ConfigInvalid(QLatticeError):
    pass


class DegenerateGram(UserWarning):
    """Gram matrix is rank deficient; a pseudo-inverse was used."""


class NoChargesFound(UserWarning):
    """The conserved-charge search returned an empty basis."""
