"""Matrix Fisher-Gaussian attitude and gyro-bias estimation."""

from .so3 import DEF1, DEF2, exp_so3, hat, log_so3, proper_svd, vee
from .matrix_fisher import MatrixFisher, normalizer, q_moments, solve_s_from_d
from .mfg import MFGParams

__all__ = [
    "DEF1",
    "DEF2",
    "MFGParams",
    "MatrixFisher",
    "exp_so3",
    "hat",
    "log_so3",
    "normalizer",
    "proper_svd",
    "q_moments",
    "solve_s_from_d",
    "vee",
]

__version__ = "0.1.0"
