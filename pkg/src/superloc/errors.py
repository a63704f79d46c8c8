"""Exception types shared across the package."""


class SuperlocError(Exception):
    """Base class for all superloc errors."""


class DegenerateGeometry(SuperlocError):
    """A direction or gradient is undefined (e.g. scatter coincides with a BS)."""


class EmptyScenario(SuperlocError):
    """A scenario has a base station with no propagation paths."""


class EmptyCandidate(SuperlocError):
    """An operation needing at least one atom received an empty candidate."""


class InvalidCondition(SuperlocError):
    """A propagation condition is inconsistent with the requested path counts."""


class ConfigError(SuperlocError):
    """A run configuration failed validation.

    ``field`` carries the dotted path of the offending entry so CLI users get
    a field-level diagnostic.
    """

    def __init__(self, field, message):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class SchemaError(SuperlocError):
    """A dataset file does not match the documented schema."""
