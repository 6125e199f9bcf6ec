"""Exception hierarchy shared across the package."""


class SEraserError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(SEraserError, ValueError):
    pass


class DivergenceUndefined(SEraserError, ArithmeticError):
    """KL(p || q) with q_k = 0 where p_k > 0."""


class UnsupportedOperation(SEraserError, NotImplementedError):
    pass


class NumericFailure(SEraserError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class StrategyUnavailable(SEraserError):
    """An auxiliary strategy or method needs an input the sample does not have."""

    def __init__(self, missing, sample_id=None):
        where = f" for sample {sample_id!r}" if sample_id is not None else ""
        super().__init__(f"missing required input {missing!r}{where}")
        self.missing = missing
        self.sample_id = sample_id


class EmptyBackground(SEraserError):
    pass


class NoForeground(SEraserError):
    pass


class GenerationError(SEraserError):
    def __init__(self, message, request=None):
        super().__init__(f"{message}; request={request!r}" if request is not None else message)
        self.request = request


class ReportError(SEraserError, ValueError):
    """Malformed report, manifest or config file."""
