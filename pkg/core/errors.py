"""
Exception types raised by the registration engine.
"""
from typing import Any, Dict, Optional


class RegistrationError(Exception):
    """Base class for all registration tool errors"""


class InvalidScaleError(RegistrationError, ValueError):
    """Scale factor outside (0, 1] or producing an empty grid"""


class InvalidArgumentError(RegistrationError, ValueError):
    """Non-finite or out-of-range numeric argument"""


class InvalidWindowError(RegistrationError, ValueError):
    """Window extents smaller than 1 or larger than the image"""


class InvalidFieldError(RegistrationError, ValueError):
    """Displacement field with non-finite values or unusable extents"""


class ShapeMismatchError(RegistrationError, ValueError):
    """Grids that should agree in extent do not"""


class EmptyRegionError(RegistrationError, ValueError):
    """A mask selects no grid points"""


class TooSmallInputError(RegistrationError, ValueError):
    """Input extent below the network's minimum"""


class InvalidTapeError(RegistrationError, ValueError):
    """Forward tape reused or mismatched with the parameters"""


class ConfigError(RegistrationError, ValueError):
    """Invalid run configuration"""


class OptimizationAbortError(RegistrationError):
    """Optimization stopped on a non-finite or diverging loss"""

    def __init__(
        self,
        message: str,
        step: Optional[int] = None,
        scale_index: Optional[int] = None,
        diagnostics: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message)
        self.message = message
        self.step = step
        self.scale_index = scale_index
        self.diagnostics = diagnostics or {}

    def with_scale(self, scale_index: int) -> 'OptimizationAbortError':
        """Return a copy tagged with the scale it happened at"""
        return type(self)(self.message, self.step, scale_index, self.diagnostics)

    def __str__(self) -> str:
        parts = [self.message]
        if self.scale_index is not None:
            parts.append(f"scale index {self.scale_index}")
        if self.step is not None:
            parts.append(f"step {self.step}")
        return ", ".join(parts)


class NonFiniteGradientError(OptimizationAbortError):
    """Gradient with NaN or infinite entries"""


class TensorParseError(RegistrationError):
    """Base class for tensor/checkpoint file parse failures"""


class BadMagicError(TensorParseError):
    """File does not start with the expected magic bytes"""


class TruncatedPayloadError(TensorParseError):
    """File ends before the declared payload"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedRoleError(TensorParseError):
    """Header declares a role the loader does not know"""
