"""Exception types shared across the package."""


class SrcKitError(Exception):
    pass


class ShapeError(SrcKitError, ValueError):
    pass


class ConfigError(SrcKitError, ValueError):
    pass


class ContractError(SrcKitError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(SrcKitError, ArithmeticError):
    """Non-finite values, zero norms, or training divergence."""


class VocabularyError(SrcKitError, KeyError):
    pass


class CapacityError(SrcKitError, ValueError):
    pass
