"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ConceptFuseError(Exception):
    exit_code = 1


class DomainError(ConceptFuseError, ValueError):
    """Input outside an operation's mathematical domain (shapes, timesteps)."""

    exit_code = 2


class ConfigurationError(ConceptFuseError, ValueError):
    exit_code = 2


class StateError(ConceptFuseError, RuntimeError):
    """Operation not valid in the object's current state (double attach, double merge)."""

    exit_code = 2


class OverwriteError(ConceptFuseError):
    exit_code = 3


class PluginError(ConceptFuseError, RuntimeError):
    exit_code = 4


class InvariantViolation(ConceptFuseError, RuntimeError):
    """A training contract was broken, e.g. a frozen parameter changed."""

    exit_code = 5
