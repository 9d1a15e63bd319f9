"""Non-stationary Gaussian-process estimation of integrated ocean heat content."""

__version__ = "0.1.0"

from .errors import InvalidArgument, NumericFailure  # noqa: E402
from .geometry import Location, cyl_distance  # noqa: E402
from .kernels import ConvolutionMode, PointParams, covariance_matrix  # noqa: E402
from .fields import KnotGrid, ParameterFieldSet, default_hyperparams  # noqa: E402
from .vecchia import VecchiaPlan, build_plan, build_U, vecchia_loglik, vecchia_predict  # noqa: E402
