"""Exception hierarchy; the CLI maps each class to a distinct exit code."""


class AutoEnsembleError(Exception):
    exit_code = 1


class ParseError(AutoEnsembleError, ValueError):
    """Malformed input file. Carries the offending line/record when known."""

    exit_code = 3

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ConfigError(AutoEnsembleError, ValueError):
    exit_code = 4


class DomainError(AutoEnsembleError, ValueError):
    """Invalid geometry, empty inputs, or an undefined evaluation."""

    exit_code = 5
