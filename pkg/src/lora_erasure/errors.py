"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NotAdaptedError(KeyError):
    """A projection was requested from an adapter that does not adapt it."""


class DegenerateShiftError(ArithmeticError):
    """An induced shift is too small for its direction to be defined."""


class OracleAssumptionError(ContractError):
    """Adapters touch the query or key projections."""


class TaxonomyError(ValueError):
    """Base class for taxonomy loading failures."""


class TaxonomyParseError(TaxonomyError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateConceptError(TaxonomyError):
    pass


class HierarchyViolationError(TaxonomyError):
    pass


class RequestValidationError(ValueError):
    """An erasure request's subset is not contained in its scope."""


class ConfigValidationError(ValueError):
    def __init__(self, keys, message: str = "invalid configuration"):
        self.keys = sorted(keys)
        super().__init__(f"{message}: {', '.join(self.keys)}")


class TrainingDivergedError(RuntimeError):
    pass


class ArtifactError(RuntimeError):
    """A run directory is missing files or holds unreadable ones."""
