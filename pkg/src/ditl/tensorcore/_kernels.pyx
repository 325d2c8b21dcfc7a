# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3D convolution kernels.

Same contracts as ``_fallback``: float64, ``N x C x H x W x D``, row-major.

Stride-1 kernels work on the flattened zero-padded volume. With padded extents
``Hp x Wp x Dp`` the output voxel ``(i, j, l)`` lives at flat position
``p = i*Wp*Dp + j*Dp + l`` and the tap ``(a, b, e)`` reads input position
``p + a*Wp*Dp + b*Dp + e``. Every tap is then a single contiguous axpy (or dot)
of length ``span = (OH-1)*Wp*Dp + (OW-1)*Dp + OD``; positions that fall in the
padding columns are computed and discarded, which is cheaper than branching.
Strided convolutions use plain nested loops.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

# flattened positions per tile; one tile of output plus its input halo stays in L1
DEF _TILE = 512


def _pad(x, Py_ssize_t pad):
    if pad == 0:
        return np.ascontiguousarray(x, dtype=np.float64)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


cdef inline void _axpy(double *y, const double *x, double a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        y[i] += a * x[i]


cdef inline double _dot(const double *x, const double *y, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef double acc = 0.0
    for i in range(n):
        acc += x[i] * y[i]
    return acc


def conv3d_forward(x, w, Py_ssize_t stride, Py_ssize_t pad):
    xp_arr = _pad(x, pad)
    cdef double[:, :, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n_b = xp_arr.shape[0], n_c = xp_arr.shape[1]
    cdef Py_ssize_t hp = xp_arr.shape[2], wp = xp_arr.shape[3], dp = xp_arr.shape[4]
    cdef Py_ssize_t n_o = wv.shape[0], k = wv.shape[2]
    cdef Py_ssize_t oh = (hp - k) // stride + 1
    cdef Py_ssize_t ow = (wp - k) // stride + 1
    cdef Py_ssize_t od = (dp - k) // stride + 1
    if stride != 1:
        return _conv_forward_strided(xp_arr, wv, stride, oh, ow, od)
    cdef Py_ssize_t vol = hp * wp * dp
    cdef Py_ssize_t span = (oh - 1) * wp * dp + (ow - 1) * dp + od
    cdef double[:, :, ::1] xf = xp_arr.reshape(n_b, n_c, vol)
    full_arr = np.zeros((n_b, n_o, hp, wp, dp))
    cdef double[:, :, ::1] yf = full_arr.reshape(n_b, n_o, vol)
    cdef Py_ssize_t n, o, c, a, b, e, off, t, m
    with nogil:
        for n in range(n_b):
            for o in range(n_o):
                for t in range(0, span, _TILE):
                    m = min(_TILE, span - t)
                    for c in range(n_c):
                        for a in range(k):
                            for b in range(k):
                                for e in range(k):
                                    off = (a * wp + b) * dp + e + t
                                    _axpy(&yf[n, o, t], &xf[n, c, off], wv[o, c, a, b, e], m)
    return np.ascontiguousarray(full_arr[:, :, :oh, :ow, :od])


cdef _conv_forward_strided(xp_arr, double[:, :, :, :, ::1] wv, Py_ssize_t s,
                           Py_ssize_t oh, Py_ssize_t ow, Py_ssize_t od):
    cdef double[:, :, :, :, ::1] xp = xp_arr
    cdef Py_ssize_t n_b = xp.shape[0], n_c = xp.shape[1], n_o = wv.shape[0], k = wv.shape[2]
    out = np.zeros((n_b, n_o, oh, ow, od))
    cdef double[:, :, :, :, ::1] y = out
    cdef Py_ssize_t n, o, c, a, b, e, i, j, l
    cdef double wt
    with nogil:
        for n in range(n_b):
            for o in range(n_o):
                for c in range(n_c):
                    for a in range(k):
                        for b in range(k):
                            for e in range(k):
                                wt = wv[o, c, a, b, e]
                                for i in range(oh):
                                    for j in range(ow):
                                        for l in range(od):
                                            y[n, o, i, j, l] += wt * xp[n, c, i * s + a, j * s + b, l * s + e]
    return out


def _embed(gy, Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t dp):
    """Place an output-grid array into the padded-plane layout, zeros elsewhere."""
    n_b, n_o, oh, ow, od = gy.shape
    full = np.zeros((n_b, n_o, hp, wp, dp))
    full[:, :, :oh, :ow, :od] = gy
    return full


def conv3d_backward_input(gy, w, in_shape, Py_ssize_t stride, Py_ssize_t pad):
    cdef double[:, :, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n_b = in_shape[0], n_c = in_shape[1]
    cdef Py_ssize_t hp = in_shape[2] + 2 * pad, wp = in_shape[3] + 2 * pad, dp = in_shape[4] + 2 * pad
    cdef Py_ssize_t n_o = wv.shape[0], k = wv.shape[2]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3], od = gy.shape[4]
    full_arr = np.zeros((n_b, n_c, hp, wp, dp))
    if stride != 1:
        _conv_backward_input_strided(np.ascontiguousarray(gy, dtype=np.float64), wv, full_arr, stride)
    else:
        _conv_backward_input_flat(_embed(gy, hp, wp, dp), wv, full_arr, oh, ow, od)
    if pad:
        return np.ascontiguousarray(full_arr[:, :, pad:-pad, pad:-pad, pad:-pad])
    return full_arr


cdef _conv_backward_input_flat(g_arr, double[:, :, :, :, ::1] wv, full_arr,
                               Py_ssize_t oh, Py_ssize_t ow, Py_ssize_t od):
    cdef Py_ssize_t n_b = full_arr.shape[0], n_c = full_arr.shape[1]
    cdef Py_ssize_t hp = full_arr.shape[2], wp = full_arr.shape[3], dp = full_arr.shape[4]
    cdef Py_ssize_t n_o = wv.shape[0], k = wv.shape[2]
    cdef Py_ssize_t vol = hp * wp * dp
    cdef Py_ssize_t span = (oh - 1) * wp * dp + (ow - 1) * dp + od
    cdef double[:, :, ::1] gf = g_arr.reshape(n_b, n_o, vol)
    cdef double[:, :, ::1] xf = full_arr.reshape(n_b, n_c, vol)
    cdef Py_ssize_t n, o, c, a, b, e, off, t, m
    with nogil:
        for n in range(n_b):
            for c in range(n_c):
                for t in range(0, span, _TILE):
                    m = min(_TILE, span - t)
                    for o in range(n_o):
                        for a in range(k):
                            for b in range(k):
                                for e in range(k):
                                    off = (a * wp + b) * dp + e + t
                                    _axpy(&xf[n, c, off], &gf[n, o, t], wv[o, c, a, b, e], m)


cdef _conv_backward_input_strided(g_arr, double[:, :, :, :, ::1] wv, full_arr, Py_ssize_t s):
    cdef double[:, :, :, :, ::1] g = g_arr
    cdef double[:, :, :, :, ::1] gx = full_arr
    cdef Py_ssize_t n_b = gx.shape[0], n_c = gx.shape[1], n_o = wv.shape[0], k = wv.shape[2]
    cdef Py_ssize_t oh = g.shape[2], ow = g.shape[3], od = g.shape[4]
    cdef Py_ssize_t n, o, c, a, b, e, i, j, l
    cdef double wt
    with nogil:
        for n in range(n_b):
            for c in range(n_c):
                for o in range(n_o):
                    for a in range(k):
                        for b in range(k):
                            for e in range(k):
                                wt = wv[o, c, a, b, e]
                                for i in range(oh):
                                    for j in range(ow):
                                        for l in range(od):
                                            gx[n, c, i * s + a, j * s + b, l * s + e] += wt * g[n, o, i, j, l]


def conv3d_backward_weight(x, gy, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    xp_arr = _pad(x, pad)
    cdef Py_ssize_t n_b = xp_arr.shape[0], n_c = xp_arr.shape[1]
    cdef Py_ssize_t hp = xp_arr.shape[2], wp = xp_arr.shape[3], dp = xp_arr.shape[4]
    cdef Py_ssize_t n_o = gy.shape[1]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3], od = gy.shape[4]
    out = np.zeros((n_o, n_c, k, k, k))
    cdef double[:, :, :, :, ::1] gw = out
    if stride != 1:
        _conv_backward_weight_strided(xp_arr, np.ascontiguousarray(gy, dtype=np.float64), gw, stride)
        return out
    cdef Py_ssize_t vol = hp * wp * dp
    cdef Py_ssize_t span = (oh - 1) * wp * dp + (ow - 1) * dp + od
    cdef double[:, :, ::1] xf = xp_arr.reshape(n_b, n_c, vol)
    cdef double[:, :, ::1] gf = _embed(gy, hp, wp, dp).reshape(n_b, n_o, vol)
    cdef Py_ssize_t n, o, c, a, b, e, off, t, m
    with nogil:
        for n in range(n_b):
            for t in range(0, span, _TILE):
                m = min(_TILE, span - t)
                for o in range(n_o):
                    for c in range(n_c):
                        for a in range(k):
                            for b in range(k):
                                for e in range(k):
                                    off = (a * wp + b) * dp + e + t
                                    gw[o, c, a, b, e] += _dot(&gf[n, o, t], &xf[n, c, off], m)
    return out


cdef _conv_backward_weight_strided(xp_arr, g_arr, double[:, :, :, :, ::1] gw, Py_ssize_t s):
    cdef double[:, :, :, :, ::1] xp = xp_arr
    cdef double[:, :, :, :, ::1] g = g_arr
    cdef Py_ssize_t n_b = xp.shape[0], n_c = xp.shape[1], n_o = g.shape[1], k = gw.shape[2]
    cdef Py_ssize_t oh = g.shape[2], ow = g.shape[3], od = g.shape[4]
    cdef Py_ssize_t n, o, c, a, b, e, i, j, l
    cdef double acc
    with nogil:
        for o in range(n_o):
            for c in range(n_c):
                for a in range(k):
                    for b in range(k):
                        for e in range(k):
                            acc = 0.0
                            for n in range(n_b):
                                for i in range(oh):
                                    for j in range(ow):
                                        for l in range(od):
                                            acc = acc + g[n, o, i, j, l] * xp[n, c, i * s + a, j * s + b, l * s + e]
                            gw[o, c, a, b, e] = acc
