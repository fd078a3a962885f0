"""Exception types shared across the package."""


class IncdetError(Exception):
    """Base class for package errors."""


class ConfigurationError(IncdetError, ValueError):
    pass


class ShapeError(IncdetError, ValueError):
    pass


class StructuralError(IncdetError, ValueError):
    """An operation was applied to a layer or tap of the wrong kind."""


class TapError(IncdetError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericError(IncdetError, ArithmeticError):
    pass


class CatalogError(IncdetError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class AnnotationParseError(IncdetError, ValueError):
    pass


class ResumeError(IncdetError, RuntimeError):
    pass
