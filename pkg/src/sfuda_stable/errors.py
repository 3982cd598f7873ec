class ConfigError(ValueError):
    """Invalid or contradictory configuration."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, batch_index=None, epoch=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.epoch = epoch


class GenerationError(RuntimeError):
    """A synthetic scene could not be placed on the canvas."""
