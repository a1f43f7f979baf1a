"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class ContractViolation(RuntimeError):
    """A precondition of an operation was not met by its caller."""


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class FormatError(ValueError):
    """A file does not follow the expected binary/text layout."""


class IntegrityError(FormatError):
    """A file is truncated or its checksum does not match."""


class PhantomSpecError(ValueError):
    pass
