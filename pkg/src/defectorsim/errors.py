"""Exception hierarchy. The CLI maps ConfigurationError to exit status 1 and
DataError to exit status 2."""


class DefectorError(Exception):
    pass


class ConfigurationError(DefectorError):
    """Invalid parameters or an experiment that cannot be set up."""


class DataError(DefectorError):
    """Input data is malformed or inconsistent."""


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class DomainError(DefectorError, ValueError):
    """An argument lies outside the domain of an operation."""


class ContractError(DefectorError, RuntimeError):
    """A caller broke an operation's precondition (e.g. time went backwards)."""


class GenerationError(ConfigurationError):
    """Synthetic data could not satisfy the requested statistics."""


class SimulationError(DataError):
    """Path simulation hit a relay/AS combination with no data."""
