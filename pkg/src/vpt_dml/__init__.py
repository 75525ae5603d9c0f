"""Prompt-tuned deep metric learning with semantic proxies"""

import os

__version__ = "0.1.0"

# BLAS thread pools are sized when numpy loads; one thread keeps reductions
# in a fixed order.
_threads = os.environ.get("DML_THREADS", "1")
for _variable in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_variable, _threads)

from .main import app  # noqa: E402

__all__ = ["app"]
