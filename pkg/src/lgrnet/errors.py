class LGRError(Exception):
    """Base class for errors raised by lgrnet."""


class InvalidArgument(LGRError, ValueError):
    pass


class InvalidState(LGRError, RuntimeError):
    pass


class ParseError(LGRError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class ConfigError(LGRError, ValueError):
    pass


class NumericError(LGRError, ArithmeticError):
    pass
