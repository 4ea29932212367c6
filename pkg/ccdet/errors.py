from __future__ import annotations


class CCDetError(Exception):
    """Root of every error raised by the package."""


class ShapeError(CCDetError, ValueError):
    pass


class ConfigError(CCDetError, ValueError):
    pass


class DatasetError(CCDetError):
    pass


class LossError(CCDetError, ValueError):
    pass


class MetricError(CCDetError, ValueError):
    pass


class WeightFileError(CCDetError):
    pass


class DivergenceError(CCDetError, ArithmeticError):
    """Non-finite loss during training."""

    def __init__(self, epoch: int, step: int, message: str = "loss is not finite"):
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} (epoch {epoch}, step {step})")
