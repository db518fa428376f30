"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class ContractError(ValueError):
    """Inputs violate an operation's shape or ordering contract."""


class DomainError(ValueError):
    """Argument lies outside the domain an operation is defined on."""


class InvariantViolation(RuntimeError):
    """Internal state that should be unreachable (e.g. a non-positive sigma)."""


class FixtureError(RuntimeError):
    """A gradient-check fixture is unusable, e.g. its loss is non-deterministic."""


class CheckpointError(RuntimeError):
    """Checkpoint is truncated, corrupted, or written by another format version."""


class NonFiniteGradient(FloatingPointError):
    """A gradient slice contains NaN or Inf."""

    def __init__(self, slice_name: str):
        super().__init__(f"non-finite gradient in slice {slice_name!r}")
        self.slice_name = slice_name
