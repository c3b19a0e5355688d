"""Geodesic X-ray transforms on a ball and their inversion.

Ray tracing for isotropic metrics, the discrete X-ray transform with its
back-projection, a regularised Neumann-series inverse applied layer by
layer, and linearised traveltime tomography built on the same machinery.
"""
from .errors import (ConfigError, DivergenceDetected, EmptyGeodesic, EmptyLayer, GeoXrayError, GridMismatch,
                     IndexOutOfRange, NoConvergence, NotOnBoundary, NoValidRays, NumericalError, OutOfBounds,
                     SingularJacobian, TrappedRay)
from .grids import Grid, GridFunction, Region
from .layers import build_partition, strip_reconstruct
from .metric import Domain, GriddedSpeed, PhasePoint, analytic_speed
from .neumann import XRayProblem, neumann_series, reconstruct, relative_error
from .tracer import Geodesic, TracerConfig, trace, trace_many, trace_with_jacobian
from .traveltime import Measurement, TraveltimeConfig, solve_traveltime
from .xray import XRayDataSet, backproject, forward, forward_matrix

__version__ = "0.1.0"
