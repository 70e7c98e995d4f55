"""Exception hierarchy.

Each family carries the process exit code the CLI uses for it.
"""


class ConsPromptError(Exception):
    exit_code = 1


class ConfigError(ConsPromptError, ValueError):
    exit_code = 2


class DataError(ConsPromptError, ValueError):
    exit_code = 3


class NumericError(ConsPromptError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ContractError(ConsPromptError, ValueError):
    """A function was called with arguments violating its precondition."""

    exit_code = 5


class VocabularyError(ContractError):
    pass


class TemplateSyntaxError(DataError):
    def __init__(self, message, position=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if position is not None:
            where.append(f"position {position}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.message = message
        self.position = position
        self.line = line


class LoadError(DataError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class CapacityError(DataError):
    def __init__(self, label, available, required):
        super().__init__(
            f"label {label!r} has {available} examples, {required} required"
        )
        self.label = label
        self.available = available
        self.required = required
