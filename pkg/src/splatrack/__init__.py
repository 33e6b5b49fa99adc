"""Event-camera 6-DOF tracking against 3D Gaussian splat maps."""

import os

# TBB shipped on many systems is too old for numba; OpenMP is always present.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
