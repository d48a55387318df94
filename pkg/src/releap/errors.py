"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration. ``problems`` lists every violated constraint."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DegenerateStratumError(ValueError):
    pass


class NoEventsError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    pass


class NumericFault(FloatingPointError):
    pass
