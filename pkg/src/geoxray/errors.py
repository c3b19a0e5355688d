"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` so the command line can map failures
onto its documented return codes without inspecting messages.
"""


class GeoXrayError(Exception):
    exit_code = 1


class ConfigError(GeoXrayError, ValueError):
    exit_code = 2


class NumericalError(GeoXrayError, ArithmeticError):
    exit_code = 3


class OutOfBounds(NumericalError):
    pass


class NotOnBoundary(GeoXrayError, ValueError):
    exit_code = 2


class TrappedRay(NumericalError):
    pass


class EmptyGeodesic(GeoXrayError, ValueError):
    exit_code = 3


class GridMismatch(GeoXrayError, ValueError):
    exit_code = 2


class NoConvergence(NumericalError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DivergenceDetected(NumericalError):
    pass


class ZeroReference(NumericalError):
    pass


class EmptyLayer(GeoXrayError, ValueError):
    exit_code = 2


class NoValidRays(NumericalError):
    pass


class SingularJacobian(NumericalError):
    pass


class IndexOutOfRange(GeoXrayError, IndexError):
    exit_code = 2
