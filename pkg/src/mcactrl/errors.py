"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class SingularSchedule(ValueError):
    pass


class ContractViolation(RuntimeError):
    """An attention override returned something the forward pass cannot use."""


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


class NotFound(LookupError):
    """Raised when the segmentation oracle finds no component for a query."""


class HookError(RuntimeError):
    def __init__(self, step: int, layer: int | None, cause: BaseException):
        where = f"step {step}" if layer is None else f"step {step}, layer {layer}"
        super().__init__(f"attention hook failed at {where}: {cause!r}")
        self.step = step
        self.layer = layer
        self.cause = cause
