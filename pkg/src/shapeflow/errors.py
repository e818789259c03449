"""Exceptions shared across modules, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Bad or unknown configuration (exit code 2)."""


class DivergenceError(RuntimeError):
    """Training produced non-finite values (exit code 3)."""
