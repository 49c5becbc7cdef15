"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`LongImputeError`, so callers (the CLI in particular) can tell
data/model problems apart from programming errors.
"""


class LongImputeError(Exception):
    pass


class ParseError(LongImputeError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicationError(ParseError):
    pass


class EligibilityError(LongImputeError, ValueError):
    pass


class IntermittentMissingnessError(LongImputeError, ValueError):
    pass


class EmptyAnalysisSetError(LongImputeError, ValueError):
    pass


class DomainError(LongImputeError, ValueError):
    pass


class SingularDesignError(LongImputeError, ArithmeticError):
    """Design matrix is rank deficient.

    ``columns`` names the offending columns when they can be identified and
    ``visit`` the visit index for per-visit regressions.
    """

    def __init__(self, message, columns=(), visit=None):
        self.columns = tuple(columns)
        self.visit = visit
        super().__init__(message)


class SampleSizeError(LongImputeError, ValueError):
    pass


class NonConvergenceError(LongImputeError, RuntimeError):
    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class DegenerateVarianceError(LongImputeError, ArithmeticError):
    def __init__(self, message, beta=None):
        self.beta = beta
        super().__init__(message)


class DegenerateInferenceError(LongImputeError, ArithmeticError):
    def __init__(self, message, coef=None):
        self.coef = coef
        super().__init__(message)


class PoolingError(LongImputeError, ValueError):
    pass


class ShapeError(LongImputeError, ValueError):
    pass


class SeparationError(LongImputeError, ArithmeticError):
    pass


class DegenerateOutcomeError(LongImputeError, ValueError):
    pass


class SingularCovarianceError(LongImputeError, ArithmeticError):
    pass


class ConfigError(LongImputeError, ValueError):
    """Invalid generator/run configuration; ``field`` is a dotted path."""

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
