from __future__ import annotations


class FusionError(Exception):
    """Base class for every error raised by the toolkit."""


class DimensionError(FusionError, ValueError):
    pass


class ContractError(FusionError, ValueError):
    pass


class NonFiniteError(FusionError, ArithmeticError):
    pass


class ImageFormatError(FusionError, OSError):
    pass


class AnnotationParseError(FusionError, ValueError):
    pass


class CheckpointFormatError(FusionError, ValueError):
    pass


class ConfigError(FusionError, ValueError):
    pass


class DatasetError(FusionError, OSError):
    pass


class SynthSpecError(FusionError, ValueError):
    pass


class TrainingDivergedError(FusionError, ArithmeticError):
    """
    Raised when a training step produces NaN/Inf; `step` is the 1-based global step.

    `losses` holds the step's loss values by name when the loss itself was still finite.
    """

    def __init__(self, step: int, reason: str, losses: dict | None = None):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step
        self.reason = reason
        self.losses = losses
