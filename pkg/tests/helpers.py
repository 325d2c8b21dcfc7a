"""Shared oracles for the test suite."""
import numpy as np

from ditl import tensorcore as tc

FD_EPS = 1e-6
REL_TOL = 1e-4


def numeric_grad(fn, leaf, eps=FD_EPS):
    """Central differences of scalar ``fn()`` with respect to every entry of ``leaf``."""
    out = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = fn().item()
        flat[i] = keep - eps
        down = fn().item()
        flat[i] = keep
        out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out


def rel_error(a, b, floor=1e-6):
    """Largest elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0


def gradcheck(fn, leaves, eps=FD_EPS):
    """Max relative error between autodiff and central differences over ``leaves``."""
    with tc.set_grad_enabled(True):
        analytic = tc.grad(fn(), list(leaves))
    worst = 0.0
    for leaf, g in zip(leaves, analytic):
        worst = max(worst, rel_error(g.data, numeric_grad(fn, leaf, eps)))
    return worst


def naive_conv3d(x, w, b=None, stride=1, pad=0):
    """Seven nested loops; the reference for the vectorised kernels."""
    n, cin, h, wd, d = x.shape
    cout, _, kh, kw, kd = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad, d + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd, pad:pad + d] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    od = (d + 2 * pad - kd) // stride + 1
    out = np.zeros((n, cout, oh, ow, od))
    for s in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    for k in range(od):
                        acc = 0.0 if b is None else b[o]
                        for c in range(cin):
                            for a in range(kh):
                                for bb in range(kw):
                                    for e in range(kd):
                                        acc += (xp[s, c, i * stride + a, j * stride + bb, k * stride + e]
                                                * w[o, c, a, bb, e])
                        out[s, o, i, j, k] = acc
    return out


def param(rng, *shape, scale=1.0):
    return tc.Tensor(scale * rng.standard_normal(shape), requires_grad=True)
