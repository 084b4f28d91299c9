"""Exception taxonomy shared by the library and the command line.

Every exception carries the process exit code the CLI reports for it:
1 usage, 2 data, 3 numeric.
"""


class LampError(Exception):
    exit_code = 3


class UsageError(LampError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class DataError(LampError):
    exit_code = 2


class VocabularyError(DataError):
    pass


class InvalidStateError(DataError):
    pass


class NumericError(LampError):
    exit_code = 3


class EmptyRowError(NumericError):
    def __init__(self, state: int, token: str = None):
        self.state = state
        label = f" ({token!r})" if token is not None else ""
        super().__init__(f"row {state}{label} of the transition matrix has empty support")


class ZeroProbabilityError(NumericError):
    def __init__(self, sequence: int, position: int):
        self.sequence = sequence
        self.position = position
        super().__init__(
            f"scored transition at sequence {sequence}, position {position} has probability 0"
        )


class NotErgodicError(NumericError):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"transition matrix is not ergodic: {reason}")


class ConvergenceError(NumericError):
    pass


class SizeGuardError(NumericError):
    pass


class VacuousBoundError(NumericError):
    def __init__(self, confidence: float, T: int):
        self.confidence = confidence
        self.T = T
        super().__init__(
            f"mixing bound is vacuous for T={T}: confidence {confidence:.6g} <= 0"
        )
