"""Exception hierarchy.

Every error raised on purpose by the package derives from ``StrokeSegError``.
The CLI maps the three families below onto process exit codes.
"""


class StrokeSegError(Exception):
    exit_code = 1


class ConfigError(StrokeSegError, ValueError):
    exit_code = 2


class DataError(StrokeSegError, ValueError):
    exit_code = 3


class NumericError(StrokeSegError, ArithmeticError):
    exit_code = 4


class UnknownTag(ConfigError):
    pass


class InvalidConfig(ConfigError):
    pass


class MissingModality(DataError):
    def __init__(self, name, where=None):
        self.name = name
        msg = name if where is None else f"{name} (in {where})"
        super().__init__(msg)


class ShapeMismatch(DataError):
    def __init__(self, shapes):
        self.shapes = dict(shapes)
        desc = ", ".join(f"{k}={tuple(v)}" for k, v in self.shapes.items())
        super().__init__(f"shape mismatch: {desc}")


class UnreadableFile(DataError):
    pass


class TooFewCases(DataError):
    pass


class CheckpointMismatch(DataError):
    pass


class ShapeError(StrokeSegError, ValueError):
    exit_code = 3


class NonFiniteLoss(NumericError):
    def __init__(self, term, value, context=None):
        self.term = term
        self.value = value
        self.context = dict(context or {})
        ctx = "".join(f", {k}={v}" for k, v in self.context.items())
        super().__init__(f"non-finite loss term {term!r} = {value}{ctx}")
