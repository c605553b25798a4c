from atlasaug.utils.typing import OptionalInt, OptionalStr


class AtlasAugError(Exception):
    """General exception to denote that something went wrong in the pipeline.

    All other exceptions *must* inherit from this."""

    pass


class ShapeMismatchError(AtlasAugError, ValueError):
    """Arguments do not agree in shape, rank, class count or divisibility."""

    pass


class NumericError(AtlasAugError, ArithmeticError):
    """A computation cannot produce a meaningful value, e.g. a zero-norm operand."""

    pass


class VolumeFormatError(AtlasAugError):
    """A volume file could not be decoded.

    The offset is the byte position where decoding failed.
    """

    def __init__(self, message: str, offset: int):
        self.message = message
        self.offset = offset

    def __str__(self):
        return f"{self.message} (at byte offset {self.offset})"


class PhantomGenerationError(AtlasAugError):
    """A phantom could not be generated with the requested structures."""

    pass


class ConfigError(AtlasAugError):
    """Invalid configuration value or config file content."""

    pass


class TrainingError(AtlasAugError):
    """Exception to denote that something went wrong while training.

    Carries the iteration and phase at which the problem was detected.
    """

    def __init__(
        self, message: str, iteration: OptionalInt = None, phase: OptionalStr = None, info: str = ""
    ):
        self.message = message
        self.iteration = iteration
        self.phase = phase
        self.info = info

    def __str__(self):
        context = []
        if self.iteration is not None:
            context.append(f"iteration {self.iteration}")
        if self.phase:
            context.append(f"phase {self.phase}")
        if context:
            return f"{self.message} [{', '.join(context)}]"
        return self.message


class NonFiniteLossError(TrainingError):
    """A loss evaluated to NaN or Inf."""

    pass


class DataExhaustedError(TrainingError):
    """There are no samples left to draw references from."""

    pass


class CheckpointError(TrainingError):
    """A checkpoint could not be written or read back."""

    pass


class AblationError(TrainingError):
    """Training of one ablation variant was aborted."""

    def __init__(self, message: str, variant: str, iteration: OptionalInt = None, phase: OptionalStr = None):
        super().__init__(message, iteration=iteration, phase=phase)
        self.variant = variant

    def __str__(self):
        return f"variant '{self.variant}': {super().__str__()}"


class EvaluationError(AtlasAugError):
    """Predictions and ground truth cannot be paired or compared."""

    pass
