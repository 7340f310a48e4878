"""Desk-scale multimodal testbed built on a float64 tape-autodiff substrate."""

import os

# Single-threaded BLAS keeps every matmul bitwise reproducible across runs.
# Must happen before numpy is first imported anywhere in the process.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
