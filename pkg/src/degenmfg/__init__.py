"""Mean-field games with possibly degenerate diffusion: particle FBSDE solvers,
linearised derivative flows and value-function derivatives."""

from .errors import (ConfigError, DimensionError, DivergenceError, FlowDivergence, MfgError,
                     MissingA4, ModelEvaluationError, NewtonDivergence, PicardDivergence,
                     SingularHessian, UnsupportedCoupling, UnsupportedDimension,
                     UnsupportedMeasureDependence)
from .measure import ParticleMeasure, w2_distance

__version__ = "0.1.0"
