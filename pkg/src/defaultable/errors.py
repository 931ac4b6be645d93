"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration; ``path`` points at the offending key."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class AdmissibilityError(ValueError):
    """A portfolio candidate violates an admissibility requirement."""

    def __init__(self, item: str, message: str):
        self.item = item
        super().__init__(f"admissibility item {item}: {message}")


class ContractViolation(RuntimeError):
    """An operation was called without its declared prerequisites."""


class NumericOverflowError(FloatingPointError):
    """A path evaluation produced a non-finite intermediate value."""

    def __init__(self, term: str, node: int):
        self.term = term
        self.node = node
        super().__init__(f"non-finite value in term '{term}' at grid node {node}")


class InfeasibleError(ValueError):
    """No admissible solution exists for the given inputs."""
