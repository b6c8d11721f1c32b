"""Hot convolution kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is selected. Set ``FEDRING_PURE_PYTHON=1`` to force the
fallback. The two backends agree to rounding, not bitwise, so determinism
guarantees hold per backend.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("FEDRING_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward = _impl.conv3x3_backward
conv_out_size = _pykernels.conv_out_size

__all__ = ["BACKEND", "conv3x3_forward", "conv3x3_backward", "conv_out_size"]
