"""Adversarial semantic segmentation with a CRF-refined discriminator.

Importing this package caps BLAS thread pools (via environment variables)
before numpy is first loaded, because single-threaded kernels are what make
the training loop bitwise reproducible. Set SEGGAN_THREADS to widen the cap;
explicit OMP/BLAS variables already present in the environment win.
"""

import os as _os

_threads = _os.environ.get("SEGGAN_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from .errors import (  # noqa: E402
    CheckpointError,
    ConfigurationError,
    DataError,
    NumericsError,
    SegGanError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "DataError",
    "NumericsError",
    "SegGanError",
    "__version__",
]
