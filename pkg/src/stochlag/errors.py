class NumericalError(RuntimeError):
    """Non-finite values or an unstable integration."""


class ResolutionError(NumericalError):
    """A map Jacobian became singular at the current resolution."""


class InversionError(NumericalError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (worst residual {residual:.3e})")
        self.residual = residual


class PicardNonconvergence(RuntimeError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
