"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class StarpolyError(Exception):
    """Base class for all starpoly errors."""


class ConfigError(StarpolyError):
    """Invalid or inconsistent run configuration. CLI exit code 2."""


class IOFailure(StarpolyError):
    """Filesystem / file-format failure. CLI exit code 3."""


class ContractViolation(StarpolyError):
    """A documented precondition was violated by the caller. CLI exit code 4."""
