"""Exception and warning types shared across the package."""


class FedCoxError(Exception):
    """Base class for package errors."""


class InvalidArgument(FedCoxError, ValueError):
    pass


class CapacityError(FedCoxError):
    pass


class ConvergenceError(FedCoxError):
    """Solver gave up before satisfying its KKT certificate.

    The last iterate and its KKT residual are kept so callers can inspect
    or warm-start from them.
    """

    def __init__(self, message, beta=None, kkt_residual=None, diagnostics=None):
        super().__init__(message)
        self.beta = beta
        self.kkt_residual = kkt_residual
        self.diagnostics = diagnostics


class UnboundedProblemError(FedCoxError):
    pass


class DegenerateVarianceError(FedCoxError):
    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class ProtocolError(FedCoxError):
    pass


class UnknownMessageType(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class VersionMismatch(ProtocolError):
    pass


class PrivacyViolation(ProtocolError):
    pass


class RoundFailure(FedCoxError):
    """A center failed (or timed out) during a synchronous round."""

    def __init__(self, message, center=None):
        super().__init__(message)
        self.center = center


class NoEventsWarning(UserWarning):
    pass
