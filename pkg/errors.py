"""Exception types shared by the TMR-RD laboratory.

Library modules raise these; cli.py catches them, logs them and maps them
to exit codes.
"""


class TmrdError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TmrdError, ValueError):
    """Operands whose shapes (or layer layouts) do not line up."""


class ConfigError(TmrdError, ValueError):
    """A configuration that failed validation.

    Args:
        problems (list): One message per bad key, all reported together.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DivergenceError(TmrdError, RuntimeError):
    """A loss became NaN or infinite during training."""

    def __init__(self, message, stage=None, iteration=None):
        self.stage = stage
        self.iteration = iteration
        where = ""
        if stage is not None:
            where = f" (stage {stage}, iteration {iteration})"
        super().__init__(f"{message}{where}")


class FormatError(TmrdError, ValueError):
    """A dataset or checkpoint file that cannot be read back."""
