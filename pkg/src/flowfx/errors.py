"""Exception types shared across the toolkit."""


class DomainError(ValueError):
    """An input violates an operation's stated precondition."""


class ConfigError(ValueError):
    """A run configuration is malformed or internally inconsistent."""


class FileFormatError(RuntimeError):
    """A file exists but cannot be parsed; carries the offending path."""

    def __init__(self, path, message, offset=None):
        self.path = str(path)
        self.offset = offset
        where = f"{path}" if offset is None else f"{path} (byte offset {offset})"
        super().__init__(f"{where}: {message}")


class SolverError(RuntimeError):
    """ODE integration failed (step underflow, NFE budget, non-finite state)."""

    def __init__(self, message, step=None, nfe=None):
        self.step = step
        self.nfe = nfe
        super().__init__(message)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the step index."""

    def __init__(self, step, message="non-finite training loss"):
        self.step = step
        super().__init__(f"{message} at step {step}")
