"""Classical and neural-process reconstruction baselines."""

from .gappy_pod import GappyPOD
from .kriging import Kriging
from .neural_process import CNP, TNP
from .rbf import RbfInterpolation

__all__ = ["GappyPOD", "Kriging", "CNP", "TNP", "RbfInterpolation"]
