class DiceLabError(Exception):
    """Base class for all library errors."""


class InputError(DiceLabError, ValueError):
    """Rejected input: bad shapes, probabilities, or arguments."""


class ModelError(DiceLabError):
    """The MDP/policy pair violates a structural assumption (reducibility, non-termination)."""


class NumericalError(DiceLabError, ArithmeticError):
    """A solve or an update produced non-finite or singular results."""


class ParseError(DiceLabError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class IntegrityError(DiceLabError, ValueError):
    """A loaded dataset breaks one of its structural invariants."""
