"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad static configuration: shape mismatch, invalid parameter, bad template."""


class DomainError(ValueError):
    """Numeric domain violation inside an op (log of non-positive, divide by zero)."""


class GradientNaN(RuntimeError):
    """A gradient became NaN or infinite; carries the offending parameter name."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter '{param_name}'")
        self.param_name = param_name
