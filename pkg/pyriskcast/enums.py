from enum import Enum


class BasisKind(str, Enum):
    """Exposure dimension of the distributed-lag cross-basis."""

    LINEAR = "linear"
    NONLINEAR = "nonlinear"  # natural cubic spline, 2 interior knots


class ProximityKind(str, Enum):
    NEIGHBOR = "neighbor"
    DISTANCE = "distance"  # strict < median road distance


class SpatialStructure(str, Enum):
    INDEPENDENT = "independent"
    ICAR = "icar"
    PROPER_CAR = "proper_car"
    BYM = "bym"

    @property
    def uses_proximity(self) -> bool:
        return self is not SpatialStructure.INDEPENDENT


class HyperRole(str, Enum):
    """Hyperparameter that scales a precision structure or the likelihood.

    Values are stored on the log scale in HyperParams. SIGMA2_PHI is a variance,
    so its multiplier is the reciprocal.
    """

    KAPPA = "kappa"
    SIGMA2_PHI = "sigma2_phi"
    TAU_THETA = "tau_theta"
    TAU_V = "tau_v"
    D = "d"


class FitStatus(str, Enum):
    OK = "ok"
    NOT_CONVERGED = "not_converged"
    FAILED = "failed"


class ScoreSet(str, Enum):
    TRAIN = "train"
    TEST = "test"


class ScoreFlag(str, Enum):
    UNDEFINED_RR_ZERO = "undefined_rr_zero"
