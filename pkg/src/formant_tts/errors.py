"""Exception types shared across the package."""


class FormantTTSError(Exception):
    pass


class DimensionError(FormantTTSError, ValueError):
    pass


class ConfigurationError(FormantTTSError, ValueError):
    pass


class InputError(FormantTTSError, ValueError):
    pass


class ContractError(FormantTTSError, ValueError):
    pass


class CapacityError(FormantTTSError, ValueError):
    pass


class VocabularyError(InputError):
    pass


class NumericError(FormantTTSError, ArithmeticError):
    pass


class LoadError(FormantTTSError, IOError):
    pass
