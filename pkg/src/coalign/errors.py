"""Exception types shared by the engines and the harness."""


class ContractViolation(ValueError):
    """An input broke a documented precondition (bad index, wrong shape)."""


class InvalidArgument(ValueError):
    pass


class ResourceLimitError(RuntimeError):
    """Exact enumeration was requested above the configured player cap."""


class DegenerateInputError(ValueError):
    pass


class NumericFailure(ArithmeticError):
    pass
