"""Pick the batched matrix-exponential kernel at import time.

The compiled ``_kernels`` extension is used when it was built; otherwise the
numpy implementation in ``_kernels_py``.  Set ``TTSHS_BACKEND=python`` to
force the fallback (the benchmark and the backend tests do this).
"""

import os

from . import _kernels_py

BACKEND = "python"
expm_stack = _kernels_py.expm_stack
expm_batch = _kernels_py.expm_batch

if os.environ.get("TTSHS_BACKEND", "").lower() not in ("python", "py", "numpy"):
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        expm_stack = _kernels.expm_stack
        expm_batch = _kernels.expm_batch
