"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalAbort -> 4. Shape mismatches raise DimensionError, which is a
ValueError so callers that only care about "bad argument" still catch it.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad key, out-of-range value, unknown selector."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class DataError(ValueError):
    """Malformed or corrupt input data (files, payloads, records)."""


class IntegrityError(DataError):
    """A serialized payload fails its structural invariants."""


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss or gradient and stopped.

    Carries the tensor name / step and, when the trainer managed to save
    one, the path of the last good checkpoint.
    """

    def __init__(self, message: str, last_good_checkpoint: str | None = None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
