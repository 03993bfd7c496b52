"""Select the kernel implementation at import time.

The compiled extension is preferred; ``TTKIT_PURE_PYTHON=1`` forces the
NumPy fallback (used by the benchmark and the backend-parity tests).
"""

import os

from . import _pykernels

python_kernels = _pykernels

try:
    from . import _kernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

if compiled_kernels is not None and os.environ.get("TTKIT_PURE_PYTHON") != "1":
    kernels = compiled_kernels
    BACKEND = "cython"
else:
    kernels = _pykernels
    BACKEND = "python"


def _as_i64(*arrays):
    import numpy as np

    return [np.ascontiguousarray(a, dtype=np.int64) for a in arrays]


def common_prefix(a_keys, a_bits, b_keys, b_bits, impl=None):
    impl = impl or kernels
    return impl.common_prefix(*_as_i64(a_keys, a_bits, b_keys, b_bits))


def tree_mask(seg_of_token, seg_parent, seg_start, seg_end, impl=None):
    impl = impl or kernels
    return impl.tree_mask(*_as_i64(seg_of_token, seg_parent, seg_start, seg_end))


def mask_rows(rows, seg_of_token, seg_parent, seg_start, seg_end, impl=None):
    impl = impl or kernels
    return impl.mask_rows(*_as_i64(rows, seg_of_token, seg_parent, seg_start, seg_end))


def predecessors(seg_of_token, seg_parent, seg_start, seg_end, impl=None):
    impl = impl or kernels
    return impl.predecessors(*_as_i64(seg_of_token, seg_parent, seg_start, seg_end))
