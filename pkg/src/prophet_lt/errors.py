"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be read or does not match the model."""


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, stage, epoch, batch, value):
        self.stage = stage
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(
            f"{stage}: non-finite loss {value!r} at epoch {epoch}, batch {batch}"
        )


class ConfigError(ValueError):
    """Raised by config validation; carries every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
