"""Exception types raised across the package."""


class TraitNeRFError(ValueError):
    """Base class for all package errors."""


class InvalidCameraError(TraitNeRFError):
    pass


class InvalidRangeError(TraitNeRFError):
    pass


class BehindCameraError(TraitNeRFError):
    pass


class InvalidCountError(TraitNeRFError):
    pass


class ShapeError(TraitNeRFError):
    pass


class RankError(TraitNeRFError):
    pass


class NonFiniteError(TraitNeRFError):
    pass


class ConfigError(TraitNeRFError):
    pass


class DegenerateAttentionError(TraitNeRFError):
    pass


class InsufficientViewsError(TraitNeRFError):
    pass


class InsufficientDataError(TraitNeRFError):
    pass


class SingularSystemError(TraitNeRFError):
    pass


class InsufficientScoresError(TraitNeRFError):
    pass
