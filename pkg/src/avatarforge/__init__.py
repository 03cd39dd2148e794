"""Animatable 3D Gaussian avatar engine with analytic guidance for testing."""

import os

# Allow kernel thread counts above the visible core count (e.g. under a
# restrictive affinity mask); must be set before numba's first import.
os.environ.setdefault("NUMBA_NUM_THREADS", "8")
# OpenMP supports set_num_threads and skips the noisy TBB version probe.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
