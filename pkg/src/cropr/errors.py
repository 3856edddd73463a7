"""Exception types raised across the package."""


class CroprError(Exception):
    """Base class for all package errors."""


class ShapeError(CroprError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CroprError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(CroprError, ValueError):
    """Invalid model / run configuration."""


class ScheduleError(CroprError, ValueError):
    """Pruning schedule is inconsistent with the model it is applied to."""


class FusionError(CroprError, ValueError):
    """Token positions do not form a complete, duplicate-free grid."""


class UnsupportedVariantError(CroprError):
    """The requested operation is not defined for this module variant."""


class GraphError(CroprError, RuntimeError):
    """Misuse of the autodiff graph (e.g. backward called twice)."""
