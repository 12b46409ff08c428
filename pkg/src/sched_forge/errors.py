"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`SchedForgeError`.
The CLI maps :class:`ConfigError` (and IO failures) to exit code 2 and every other
domain error to exit code 1.
"""


class SchedForgeError(Exception):
    pass


class ConfigError(SchedForgeError):
    pass


# workload
class TraceError(SchedForgeError):
    pass


class MissingFieldsError(TraceError):
    pass


class NonNumericFieldError(TraceError):
    pass


class EmptyTraceError(TraceError):
    pass


class OutOfRangeError(TraceError):
    pass


class InvalidParamsError(TraceError, ConfigError):
    pass


# simulator
class SimulationError(SchedForgeError):
    pass


class JobTooLargeError(SimulationError):
    pass


class EmptySequenceError(SimulationError):
    pass


class BadIndexError(SimulationError):
    pass


class ZeroHorizonError(SimulationError):
    pass


class InvariantViolation(SimulationError):
    pass


# baselines
class NonPositiveRuntimeError(SchedForgeError):
    pass


class EmptyWindowError(SchedForgeError):
    pass


# metrics
class NegativeInputError(SchedForgeError):
    pass


class EmptyResultsError(SchedForgeError):
    pass


# neural
class ShapeMismatchError(SchedForgeError):
    pass


class CheckpointShapeMismatch(ShapeMismatchError):
    pass


class NoValidJobsError(SchedForgeError):
    pass


# rl-core
class LengthMismatchError(SchedForgeError):
    pass


class EmptyBatchError(SchedForgeError):
    pass


class NonFiniteLossError(SchedForgeError):
    pass


# ddppo
class NoGradientsError(SchedForgeError):
    pass


class TrainingAborted(SchedForgeError):
    pass


class UnscoredMemberError(SchedForgeError):
    pass


class AllTrialsFailedError(SchedForgeError):
    pass


# bench-cli
class ProtocolMismatchError(SchedForgeError):
    pass
