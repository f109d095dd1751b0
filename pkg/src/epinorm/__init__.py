"""Learned and optimized normalizations for the eight-point algorithm."""

import os

# EPN_THREADS caps BLAS threads; it only takes effect before numpy loads
if "EPN_THREADS" in os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["EPN_THREADS"])

from .core import CorrespondenceSet, eight_point, fmat_distance, sample_loss  # noqa: E402
from .errors import EpinormError  # noqa: E402
from .normalization import NormParams, build_T, hartley_params  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "CorrespondenceSet", "EpinormError", "NormParams", "build_T", "eight_point",
    "fmat_distance", "hartley_params", "sample_loss",
]
