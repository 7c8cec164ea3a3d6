"""Optical flow estimation for compressed video with block motion-vector
priors: a minimal autodiff tensor engine, MV sidecar ingestion, the
converting module (credibility-weighted windowed attention), warm-start
fusion, an iterative refiner, metrics, and a verified training loop.
"""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
