# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3x3 convolution kernels (padding 1), float32 and float64."""

import numpy as np
cimport cython

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out_size(Py_ssize_t size, Py_ssize_t stride) noexcept nogil:
    return (size - 1) // stride + 1


def conv_out_size(size, stride):
    return (size - 1) // stride + 1


# Both passes work tap by tap: the input pixels seen by one of the nine taps
# are gathered into a contiguous (C_in, P) buffer (P = output pixels), which
# turns the convolution into nine small matrix products whose inner loops run
# over contiguous memory.


cdef void _gather(const real[:, :, :, ::1] x, Py_ssize_t i, Py_ssize_t ky, Py_ssize_t kx, Py_ssize_t stride,
                  real[:, ::1] col, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t ci, oy, ox, iy, ix, p
    for ci in range(c):
        p = 0
        for oy in range(ho):
            iy = oy * stride + ky - 1
            for ox in range(wo):
                ix = ox * stride + kx - 1
                if 0 <= iy < h and 0 <= ix < wd:
                    col[ci, p] = x[i, ci, iy, ix]
                else:
                    col[ci, p] = 0
                p += 1


def _forward(const real[:, :, :, ::1] x, const real[:, :, :, ::1] w, const real[::1] b,
             real[:, :, ::1] out, Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo, real[:, ::1] col):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], o = w.shape[0], npix = ho * wo
    cdef Py_ssize_t i, co, ci, ky, kx, q
    cdef real wv, bv
    with nogil:
        for i in range(n):
            for co in range(o):
                bv = b[co]
                for q in range(npix):
                    out[i, co, q] = bv
            for ky in range(3):
                for kx in range(3):
                    _gather(x, i, ky, kx, stride, col, ho, wo)
                    for co in range(o):
                        for ci in range(c):
                            wv = w[co, ci, ky, kx]
                            for q in range(npix):
                                out[i, co, q] += wv * col[ci, q]


def _backward(const real[:, :, :, ::1] x, const real[:, :, :, ::1] w, const real[:, :, ::1] g,
              real[:, :, :, ::1] gx, real[:, :, ::1] gwt, real[::1] gb, Py_ssize_t stride,
              Py_ssize_t ho, Py_ssize_t wo, real[:, ::1] col, real[:, ::1] colt, real[:, ::1] gcol):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], npix = ho * wo
    cdef Py_ssize_t i, co, ci, ky, kx, q, t, oy, ox, iy, ix
    cdef real wv, gv, acc
    with nogil:
        for i in range(n):
            for co in range(o):
                acc = 0
                for q in range(npix):
                    acc = acc + g[i, co, q]
                gb[co] += acc
            for ky in range(3):
                for kx in range(3):
                    t = ky * 3 + kx
                    _gather(x, i, ky, kx, stride, col, ho, wo)
                    if c < 8:
                        # few input channels: plain dot products over the pixels
                        for co in range(o):
                            for ci in range(c):
                                acc = 0
                                for q in range(npix):
                                    acc = acc + g[i, co, q] * col[ci, q]
                                gwt[t, co, ci] += acc
                    else:
                        # many input channels: gwt[t, co, :] += g[i, co, q] * colt[q, :]
                        for ci in range(c):
                            for q in range(npix):
                                colt[q, ci] = col[ci, q]
                        for co in range(o):
                            for q in range(npix):
                                gv = g[i, co, q]
                                for ci in range(c):
                                    gwt[t, co, ci] += gv * colt[q, ci]
                    # input gradient through the gathered buffer
                    for ci in range(c):
                        for q in range(npix):
                            gcol[ci, q] = 0
                    for co in range(o):
                        for ci in range(c):
                            wv = w[co, ci, ky, kx]
                            for q in range(npix):
                                gcol[ci, q] += wv * g[i, co, q]
                    for ci in range(c):
                        q = 0
                        for oy in range(ho):
                            iy = oy * stride + ky - 1
                            for ox in range(wo):
                                ix = ox * stride + kx - 1
                                if 0 <= iy < h and 0 <= ix < wd:
                                    gx[i, ci, iy, ix] += gcol[ci, q]
                                q += 1


def conv3x3_forward(x, w, b, stride):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    b = np.ascontiguousarray(b, dtype=x.dtype)
    n, c, h, wd = x.shape
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    out = np.empty((n, w.shape[0], ho * wo), dtype=x.dtype)
    col = np.empty((c, ho * wo), dtype=x.dtype)
    _forward(x, w, b, out, stride, ho, wo, col)
    return out.reshape(n, w.shape[0], ho, wo)


def conv3x3_backward(x, w, grad_out, stride):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    n, c, h, wd = x.shape
    o = w.shape[0]
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    g = np.ascontiguousarray(grad_out, dtype=x.dtype).reshape(n, o, ho * wo)
    gx = np.zeros_like(x)
    gwt = np.zeros((9, o, c), dtype=x.dtype)
    gb = np.zeros(o, dtype=x.dtype)
    col = np.empty((c, ho * wo), dtype=x.dtype)
    colt = np.empty((ho * wo, c), dtype=x.dtype)
    gcol = np.empty((c, ho * wo), dtype=x.dtype)
    _backward(x, w, g, gx, gwt, gb, stride, ho, wo, col, colt, gcol)
    gw = np.ascontiguousarray(gwt.reshape(3, 3, o, c).transpose(2, 3, 0, 1))
    return gx, gw, gb
