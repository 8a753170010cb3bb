class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class GenerationError(RuntimeError):
    """The synthetic benchmark cannot satisfy the requested layout."""


class TruncationError(ContractError):
    """Input text exceeds the configured maximum sequence length."""
