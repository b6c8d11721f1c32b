"""Pure numpy 3x3 convolution kernels (padding 1).

These are the reference implementations; the compiled module mirrors their
signatures exactly.
"""

import numpy as np


def conv_out_size(size: int, stride: int) -> int:
    return (size - 1) // stride + 1


def conv3x3_forward(x, w, b, stride):
    """x: (N, C, H, W), w: (O, C, 3, 3), b: (O,) -> (N, O, Ho, Wo)."""
    n, c, h, wd = x.shape
    ho, wo = conv_out_size(h, stride), conv_out_size(wd, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], ho, wo), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            patch = xp[:, :, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride]
            out += np.tensordot(patch, w[:, :, ky, kx], axes=([1], [1])).transpose(0, 3, 1, 2)
    out += b[None, :, None, None]
    return out


def conv3x3_backward(x, w, grad_out, stride):
    """Returns (grad_x, grad_w, grad_b) for conv3x3_forward."""
    n, c, h, wd = x.shape
    _, _, ho, wo = grad_out.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for ky in range(3):
        for kx in range(3):
            ys = slice(ky, ky + stride * (ho - 1) + 1, stride)
            xs = slice(kx, kx + stride * (wo - 1) + 1, stride)
            gw[:, :, ky, kx] = np.tensordot(grad_out, xp[:, :, ys, xs], axes=([0, 2, 3], [0, 2, 3]))
            gxp[:, :, ys, xs] += np.tensordot(grad_out, w[:, :, ky, kx], axes=([1], [0])).transpose(0, 3, 1, 2)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gxp[:, :, 1:h + 1, 1:wd + 1].copy(), gw, gb.astype(x.dtype)
