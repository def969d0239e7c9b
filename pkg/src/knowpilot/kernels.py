"""Kernel backend selector.

The LCS diff kernel prefers the compiled ``_kernels`` extension and falls
back to the pure implementation when the extension was not built; set
``KNOWPILOT_PURE_PYTHON=1`` to force the fallback (used by the benchmark
and the backend-equivalence tests).  The cosine scan is numpy in every
configuration: BLAS outruns a hand-written loop (see
benchmarks/bench_kernels.py), so compiling it would be a pessimization.
"""

from __future__ import annotations

import os

from . import _kernels_py

cosine_scores = _kernels_py.cosine_scores

if os.environ.get("KNOWPILOT_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

lcs_keep_flags = _impl.lcs_keep_flags
