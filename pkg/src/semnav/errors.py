"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class NotFound(KeyError):
    pass


class InvalidState(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str = "training-diverged"):
        if "training-diverged" not in message:
            message = f"training-diverged: {message}"
        super().__init__(message)
