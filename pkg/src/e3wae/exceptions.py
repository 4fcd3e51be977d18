"""Exception types raised across the package."""


class E3WAEError(Exception):
    """Base class for all package errors."""


class ContractViolation(E3WAEError, ValueError):
    """An operation was called with arguments that break its preconditions."""


class ShapeError(ContractViolation):
    pass


class DomainError(E3WAEError, ArithmeticError):
    """A numerical primitive received input outside its domain."""


class ValidationError(E3WAEError, ValueError):
    """A data object (graph, vocabulary, config) failed its invariants."""


class UndefinedPropertyError(E3WAEError, ValueError):
    pass


class GenerationError(E3WAEError, RuntimeError):
    pass


class ParseError(E3WAEError, ValueError):
    """Malformed input file."""


class UnsupportedVersionError(ParseError):
    pass


class NonFiniteLossError(E3WAEError, FloatingPointError):
    pass
