"""Desk-scale frame interpolation: scale-agnostic features, coarse-to-fine flow, fusion."""

import os as _os

# The one environment override: cap BLAS/OpenMP threads before numpy loads.
_threads = _os.environ.get("FILM_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
