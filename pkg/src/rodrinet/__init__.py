"""Kinematics-aware neural operators and networks for articulated robots."""

import os

# The numba kernels (OpenMP) and numpy's BLAS otherwise fight over cores
# with spin-waiting when their calls interleave inside a training step. Must
# be set before numba starts its thread pool.
os.environ.setdefault("OMP_WAIT_POLICY", "PASSIVE")

__version__ = "0.1.0"
