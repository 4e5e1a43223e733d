"""Exception hierarchy shared across the package."""


class EhrTextError(Exception):
    """Base class for all package errors."""


class InvalidInputError(EhrTextError, ValueError):
    pass


class DegenerateVectorError(EhrTextError, ValueError):
    """A zero-norm vector reached a normalization."""


class ContractViolation(EhrTextError, ValueError):
    pass


class ConfigError(EhrTextError, ValueError):
    pass


class DivergenceError(EhrTextError, RuntimeError):
    """Non-finite values appeared in a forward pass or loss."""


class GradcheckError(EhrTextError, RuntimeError):
    pass


class EmptySchemaError(EhrTextError, ValueError):
    pass


class SchemaMismatchError(EhrTextError, ValueError):
    pass


class MaskingError(EhrTextError, RuntimeError):
    pass


class DataError(EhrTextError, ValueError):
    pass


class InsufficientDataError(DataError):
    pass


class DuplicateKeyError(DataError):
    pass


class EmptyJoinError(DataError):
    pass


class UndefinedAUCError(EhrTextError, ValueError):
    pass


class IntegrityError(EhrTextError, IOError):
    pass


class UnsupportedVersionError(EhrTextError, IOError):
    pass


class StageMismatchError(EhrTextError, ValueError):
    pass
