"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed binary dataset file."""


class NumericError(ArithmeticError):
    pass


class NotPSDError(NumericError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, step, message="loss became NaN"):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


class ConfigError(ValueError):
    """Bad or incomplete run configuration; carries the offending field."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
