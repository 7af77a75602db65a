"""Long-tailed surgical triplet recognition on synthetic data.

Pure numpy models with hand-written backward passes, Gaussian-mixture prompt
pools, a task-prompt adapter and a masked gradient-coordination loss.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
