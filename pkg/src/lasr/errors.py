"""Exception types shared across the package."""


class LasrError(Exception):
    pass


class ParameterError(LasrError, ValueError):
    pass


class TopologyError(LasrError, ValueError):
    pass


class DegenerateGeometryError(LasrError, ValueError):
    pass


class UsageError(LasrError, RuntimeError):
    pass


class FormatError(LasrError, ValueError):
    pass


class InputError(LasrError, ValueError):
    """Measurements that cannot be used (empty masks, too few frames)."""


class DivergenceError(LasrError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
