"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class VocabularyError(KeyError):
    """A token is not present in the vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""
