"""Exception hierarchy shared by every cfclip module."""


class CFClipError(Exception):
    """Base class for all library errors."""


class ZeroVector(CFClipError, ValueError):
    pass


class DimensionMismatch(CFClipError, ValueError):
    pass


class BadTemplate(CFClipError, ValueError):
    pass


class BadDims(CFClipError, ValueError):
    pass


class BadFraction(CFClipError, ValueError):
    pass


class BackendFailure(CFClipError, RuntimeError):
    pass


class MissingBackend(CFClipError, LookupError):
    """Raised when an optional frozen network (identity / perceptual) is absent."""


class DegenerateHomography(CFClipError, ValueError):
    pass


class MissingTerm(CFClipError, KeyError):
    pass


class NonFiniteLoss(CFClipError, FloatingPointError):
    def __init__(self, step, terms):
        self.step = step
        self.terms = dict(terms)
        super().__init__(f"non-finite loss at step {step}: {self.terms}")


class UnknownVariant(CFClipError, ValueError):
    pass


class ConfigError(CFClipError, ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class CorruptCheckpoint(CFClipError, ValueError):
    def __init__(self, path, failed_fields):
        self.path = str(path)
        self.failed_fields = list(failed_fields)
        super().__init__(f"corrupt checkpoint {self.path}: " + "; ".join(self.failed_fields))


class LatentFormatError(CFClipError, ValueError):
    pass
