"""Pure-numpy reference kernels for 3D convolution.

These mirror the compiled kernels in ``_kernels.pyx`` one to one. Arrays are
float64, batch-first ``N x C x H x W x D`` with the last axis contiguous.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# samples per im2col chunk; bounds the temporary to a few tens of MB
_CHUNK_ELEMS = 4_000_000


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _windows(xp, k, stride):
    v = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return v[:, :, ::stride, ::stride, ::stride]


def _chunks(n, per_sample):
    step = max(1, _CHUNK_ELEMS // max(per_sample, 1))
    for lo in range(0, n, step):
        yield slice(lo, min(n, lo + step))


def conv3d_forward(x, w, stride, pad):
    n, c = x.shape[:2]
    o, _, k = w.shape[:3]
    xp = _pad(x, pad)
    win = _windows(xp, k, stride)
    out_sp = win.shape[2:5]
    y = np.empty((n, o) + out_sp)
    wm = w.reshape(o, -1)
    per = c * k ** 3 * int(np.prod(out_sp))
    for sl in _chunks(n, per):
        cols = np.ascontiguousarray(win[sl].transpose(0, 2, 3, 4, 1, 5, 6, 7))
        cols = cols.reshape(-1, c * k ** 3)
        r = (cols @ wm.T).reshape((sl.stop - sl.start,) + out_sp + (o,))
        y[sl] = np.moveaxis(r, -1, 1)
    return y


def conv3d_backward_input(gy, w, in_shape, stride, pad):
    n, c, h, wd, d = in_shape
    k = w.shape[2]
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad, d + 2 * pad))
    oh, ow, od = gy.shape[2:]
    for a in range(k):
        for b in range(k):
            for e in range(k):
                contrib = np.tensordot(w[:, :, a, b, e], gy, axes=([0], [1]))
                gxp[:, :,
                    a:a + stride * (oh - 1) + 1:stride,
                    b:b + stride * (ow - 1) + 1:stride,
                    e:e + stride * (od - 1) + 1:stride] += contrib.transpose(1, 0, 2, 3, 4)
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad:-pad, pad:-pad, pad:-pad])
    return gxp


def conv3d_backward_weight(x, gy, k, stride, pad):
    n, c = x.shape[:2]
    o = gy.shape[1]
    xp = _pad(x, pad)
    win = _windows(xp, k, stride)
    out_sp = gy.shape[2:]
    gw = np.zeros((o, c * k ** 3))
    per = c * k ** 3 * int(np.prod(out_sp))
    for sl in _chunks(n, per):
        cols = np.ascontiguousarray(win[sl].transpose(0, 2, 3, 4, 1, 5, 6, 7))
        cols = cols.reshape(-1, c * k ** 3)
        g = np.moveaxis(gy[sl], 1, -1).reshape(-1, o)
        gw += g.T @ cols
    return gw.reshape(o, c, k, k, k)
