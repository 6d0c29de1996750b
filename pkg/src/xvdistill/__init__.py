"""Cross-view distillation of ground-level label distributions onto overhead features."""

from ._accel import USE_NUMBA
from .specfn import DomainError, digamma, log_beta, log_gamma

__version__ = "0.1.0"
