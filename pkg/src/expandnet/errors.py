"""Exception hierarchy.

Every error carries a short machine-parsable ``code`` that the command line
front end prints on failure.
"""


class ExpandNetError(Exception):
    code = "E_GENERIC"


class ConfigurationError(ExpandNetError, ValueError):
    code = "E_CONFIG"


class InputError(ExpandNetError, ValueError):
    code = "E_INPUT"


class StateError(ExpandNetError, RuntimeError):
    code = "E_STATE"


class TaskLookupError(ExpandNetError, KeyError):
    code = "E_LOOKUP"

    def __str__(self):
        # KeyError quotes its argument; keep plain messages
        return str(self.args[0]) if self.args else ""


class CorruptionError(ExpandNetError, IOError):
    code = "E_CORRUPT"


class DatasetMissingError(ExpandNetError, FileNotFoundError):
    code = "E_DATASET"


class TrainingDivergenceError(ExpandNetError, FloatingPointError):
    code = "E_DIVERGED"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class PruneEquivalenceError(ExpandNetError, AssertionError):
    code = "E_PRUNE"
