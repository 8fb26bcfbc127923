"""Sparse-coded compression of implicit neural representations."""
import os as _os

# Thread caps must be in place before numpy loads its BLAS.
_threads = _os.environ.get("SINR_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
