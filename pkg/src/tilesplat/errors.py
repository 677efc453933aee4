"""Exception hierarchy shared by every tilesplat module."""


class SplatError(Exception):
    """Base class for all tilesplat errors."""


class ZeroQuaternion(SplatError, ValueError):
    pass


class FormatError(SplatError, ValueError):
    pass


class NonFiniteParameter(SplatError, FloatingPointError):
    pass


class NegativeDepth(SplatError, ValueError):
    pass


class UnsortedInput(SplatError, ValueError):
    pass


class DimensionMismatch(SplatError, ValueError):
    pass


class StaleAux(SplatError, ValueError):
    pass


class ShapeMismatch(SplatError, ValueError):
    pass


class BudgetViolation(SplatError, ValueError):
    pass


class BudgetExceeded(SplatError, MemoryError):
    pass


class StaleHandle(SplatError, KeyError):
    pass


class DoubleFree(StaleHandle):
    pass


class ZeroTotal(SplatError, ZeroDivisionError):
    pass


class NestedStage(SplatError, RuntimeError):
    pass


class NegativeUnaccounted(SplatError, ValueError):
    pass


class TooSmall(SplatError, ValueError):
    pass


class TooFewSamples(SplatError, ValueError):
    pass


class InvalidOrder(SplatError, ValueError):
    pass


class IncompleteGrid(SplatError, ValueError):
    pass


class MissingFile(SplatError, FileNotFoundError):
    pass


class BadJson(SplatError, ValueError):
    pass


class ConfigError(SplatError, ValueError):
    pass


class NumericalFailure(SplatError, FloatingPointError):
    pass
