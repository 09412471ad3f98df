"""Hot inner-loop kernels with switchable backends.

The guidance losses walk every K x K patch of a feature grid computing
pairwise pixel distances; that mining loop and the valid-aware depth
downsampling are the innermost numeric loops of training.  Both exist as
numba ``@njit`` kernels and as vectorized pure-numpy fallbacks.

Selection: ``UNIDPS_BACKEND=numpy`` forces the fallback,
``UNIDPS_BACKEND=numba`` requires numba, unset prefers numba when it
imports.  ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

_requested = os.environ.get("UNIDPS_BACKEND", "").strip().lower()
if _requested not in ("", "numpy", "numba"):
    raise RuntimeError(f"UNIDPS_BACKEND must be 'numpy' or 'numba', got {_requested!r}")

if _requested == "numpy":
    from . import np_kernels as _impl
    BACKEND = "numpy"
else:
    try:
        from . import nb_kernels as _impl
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from . import np_kernels as _impl
        BACKEND = "numpy"

sg_mine = _impl.sg_mine
dg_forward = _impl.dg_forward
valid_nearest_downsample = _impl.valid_nearest_downsample
