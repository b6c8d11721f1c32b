import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedring import kernels
from fedring.kernels import _pykernels

try:
    from fedring.kernels import _ckernels
except ImportError:
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def _case(rng, n, c, o, size, stride, dtype):
    x = rng.standard_normal((n, c, size, size)).astype(dtype)
    w = rng.standard_normal((o, c, 3, 3)).astype(dtype)
    b = rng.standard_normal(o).astype(dtype)
    out_size = _pykernels.conv_out_size(size, stride)
    g = rng.standard_normal((n, o, out_size, out_size)).astype(dtype)
    return x, w, b, g


def _naive_conv(x, w, b, stride):
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w) + b
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_numpy_kernel_matches_naive_loop(stride):
    rng = np.random.default_rng(0)
    x, w, b, _ = _case(rng, 2, 3, 4, 7, stride, np.float64)
    assert np.allclose(_pykernels.conv3x3_forward(x, w, b, stride), _naive_conv(x, w, b, stride), atol=1e-12)


@needs_ext
@given(
    n=st.integers(1, 3), c=st.integers(1, 9), o=st.integers(1, 9), size=st.integers(1, 12),
    stride=st.sampled_from([1, 2]), dtype=st.sampled_from([np.float32, np.float64]), seed=st.integers(0, 10_000),
)
@settings(max_examples=60, deadline=None)
def test_backends_agree(n, c, o, size, stride, dtype, seed):
    rng = np.random.default_rng(seed)
    x, w, b, g = _case(rng, n, c, o, size, stride, dtype)
    tol = 1e-10 if dtype == np.float64 else 1e-4
    fy = _pykernels.conv3x3_forward(x, w, b, stride)
    fc = _ckernels.conv3x3_forward(x, w, b, stride)
    assert fc.dtype == fy.dtype and fc.shape == fy.shape
    assert np.allclose(fc, fy, atol=tol, rtol=tol)
    for a, bb in zip(_pykernels.conv3x3_backward(x, w, g, stride), _ckernels.conv3x3_backward(x, w, g, stride)):
        assert a.shape == bb.shape
        assert np.allclose(a, bb, atol=tol * 10, rtol=tol)


@needs_ext
def test_compiled_kernel_accepts_read_only_inputs():
    rng = np.random.default_rng(1)
    x, w, b, g = _case(rng, 2, 2, 3, 6, 2, np.float32)
    for arr in (x, w, b, g):
        arr.setflags(write=False)
    out = _ckernels.conv3x3_forward(x, w, b, 2)
    assert np.allclose(out, _pykernels.conv3x3_forward(x, w, b, 2), atol=1e-5)
    _ckernels.conv3x3_backward(x, w, g, 2)


def test_backend_override_by_environment():
    code = "from fedring.kernels import BACKEND; print(BACKEND)"
    env = dict(os.environ, FEDRING_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND in ("python", "cython")
