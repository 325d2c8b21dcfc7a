"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable op records its parents and a backward closure. Backward
closures are themselves written with tensor ops, so running them while grad
mode is on (``grad(..., create_graph=True)``) yields gradients that are graph
nodes and can be differentiated again.
"""
from __future__ import annotations

import contextlib
import itertools

import numpy as np

from . import kernels

_GRAD_ENABLED = True
_ids = itertools.count(1)


class GraphError(RuntimeError):
    """Raised for invalid gradient requests."""


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def is_grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def set_grad_enabled(mode):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = bool(mode)
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.id = next(_ids)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # basic properties
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def isfinite(self):
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self, grad_output=None, create_graph=False):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        leaves = [n for n in _topo_order(self) if n.is_leaf and n.requires_grad]
        grads = grad(self, leaves, grad_output=grad_output, create_graph=create_graph)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g if leaf.grad is None else add(leaf.grad, g)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def grad(output, inputs, grad_output=None, create_graph=False, allow_unused=False):
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    ``output`` must be a scalar unless ``grad_output`` is given. With
    ``create_graph`` the returned gradients carry their own graph.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise GraphError(f"grad of non-scalar output {output.shape} needs grad_output")
        grad_output = Tensor(np.ones_like(output.data))
    else:
        grad_output = as_tensor(grad_output)
    if not output.requires_grad:
        raise GraphError("output is not part of a differentiable graph")

    order = _topo_order(output)
    wanted = {t.id for t in inputs}
    # nodes lying on a path from some input to the output
    live = set()
    for node in order:  # parents precede children
        if node.id in wanted or any(p.id in live for p in node._parents):
            live.add(node.id)
    missing = [t for t in inputs if t.id not in live]
    if missing and not allow_unused:
        raise GraphError(f"{len(missing)} requested tensor(s) are not in the graph of the output")

    grads = {output.id: grad_output}
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            g = grads.get(node.id)
            if g is None or node._backward is None:
                continue
            needs = tuple(p.id in live for p in node._parents)
            if not any(needs):
                continue
            if node.id not in wanted:
                del grads[node.id]
            pgrads = node._backward(g, needs)
            for p, pg, need in zip(node._parents, pgrads, needs):
                if not need or pg is None:
                    continue
                prev = grads.get(p.id)
                grads[p.id] = pg if prev is None else add(prev, pg)
    result = []
    for t in inputs:
        g = grads.get(t.id)
        if g is None and t.id in live:
            g = Tensor(np.zeros_like(t.data))
        if g is not None and not create_graph:
            g = Tensor(g.data)
        result.append(g)
    return result[0] if single else result


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    axes = tuple(range(nlead)) + tuple(
        i + nlead for i, s in enumerate(shape) if s == 1 and g.shape[i + nlead] != 1
    )
    out = tsum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(neg(g), b.shape) if needs[1] else None)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (_unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast(mul(g, a), b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        ga = _unbroadcast(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def power(a, p):
    p = float(p)

    def backward(g, needs):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _make(a.data ** p, (a,), backward, "pow")


def exp(a):
    out = np.exp(a.data)

    def backward(g, needs):
        e = exp(a) if _GRAD_ENABLED else Tensor(out)
        return (mul(g, e),)

    return _make(out, (a,), backward, "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g, needs: (div(g, a),), "log")


def relu(a):
    mask = (a.data > 0).astype(np.float64)
    m = Tensor(mask)
    return _make(a.data * mask, (a,), lambda g, needs: (mul(g, m),), "relu")


def clamp_min(a, floor):
    """max(a, floor); the gradient is passed only where a > floor."""
    keep = a.data > floor
    m = Tensor(keep.astype(np.float64))
    return _make(np.where(keep, a.data, floor), (a,), lambda g, needs: (mul(g, m),), "clamp_min")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def backward(g, needs):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def broadcast_to(a, shape):
    shape = tuple(shape)
    if a.shape == shape:
        return a

    def backward(g, needs):
        return (_unbroadcast(g, a.shape),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward, "broadcast")


def reshape(a, shape):
    shape = tuple(shape)
    src = a.shape

    def backward(g, needs):
        return (reshape(g, src),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def flatten(a, start=1):
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g, needs):
        return (transpose(g, inv),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward, "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), backward, "concat")


def getitem(a, index):
    def backward(g, needs):
        return (index_scatter(g, index, a.shape),)

    return _make(np.array(a.data[index]), (a,), backward, "getitem")


def index_scatter(g, index, shape):
    """Zeros of ``shape`` with ``g`` added at ``index`` (adjoint of getitem)."""
    out = np.zeros(shape)
    if _is_basic(index):
        out[index] = g.data
    else:
        np.add.at(out, index, g.data)

    def backward(gg, needs):
        return (getitem(gg, index),)

    return _make(out, (g,), backward, "index_scatter")


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None
               for i in items)


def gather_flat(a, flat_idx, out_shape):
    """out.flat[i] = a.flat[flat_idx[i]]; indices are constants."""
    flat_idx = np.asarray(flat_idx).ravel()
    src = a.shape

    def backward(g, needs):
        return (scatter_flat(g, flat_idx, src),)

    return _make(a.data.ravel()[flat_idx].reshape(out_shape), (a,), backward, "gather")


def scatter_flat(g, flat_idx, shape):
    out = np.zeros(int(np.prod(shape)))
    np.add.at(out, flat_idx, g.data.ravel())

    def backward(gg, needs):
        return (gather_flat(gg, flat_idx, g.shape),)

    return _make(out.reshape(shape), (g,), backward, "scatter")


def _arg_reduce(a, axes, fn):
    """Flat indices of the first extremum of ``a`` over trailing ``axes``."""
    nkeep = a.ndim - len(axes)
    if axes != tuple(range(nkeep, a.ndim)):
        raise ShapeError("extremum reductions are supported over trailing axes only")
    lead = a.shape[:nkeep]
    block = int(np.prod(a.shape[nkeep:]))
    flat = a.data.reshape(-1, block)
    pos = fn(flat, axis=1)
    idx = np.arange(flat.shape[0]) * block + pos
    return idx, lead + (1,) * len(axes)


def amax(a, axis, keepdims=True):
    """Max over trailing axes; the gradient goes to the first maximal entry."""
    axes = _norm_axes(axis, a.ndim)
    idx, kshape = _arg_reduce(a, axes, np.argmax)
    out = gather_flat(a, idx, kshape)
    return out if keepdims else reshape(out, a.shape[: a.ndim - len(axes)])


def amin(a, axis, keepdims=True):
    axes = _norm_axes(axis, a.ndim)
    idx, kshape = _arg_reduce(a, axes, np.argmin)
    out = gather_flat(a, idx, kshape)
    return out if keepdims else reshape(out, a.shape[: a.ndim - len(axes)])


# ---------------------------------------------------------------------------
# linear algebra and network layers


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def dense(x, weight, bias=None):
    """Affine map ``W x + b`` for a vector ``x`` or a batch of row vectors."""
    x = as_tensor(x)
    if weight.ndim != 2:
        raise ShapeError(f"dense: weight must be 2-D, got {weight.shape}")
    squeeze = x.ndim == 1
    xb = reshape(x, (1, -1)) if squeeze else x
    if xb.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"dense: input width {xb.shape[1]} does not match weight {weight.shape}")
    out = matmul(xb, transpose(weight))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
        out = add(out, bias)
    return reshape(out, (weight.shape[0],)) if squeeze else out


def softmax(x, axis=-1):
    if x.size == 0:
        raise ShapeError("softmax of an empty tensor")
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def _out_extent(n, k, stride, pad, axis):
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv3d: axis {axis} extent {n} with kernel {k}, stride {stride}, "
            f"padding {pad} does not give an integral output extent")
    return span // stride + 1


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3-D cross-correlation.

    ``x`` is ``N x Cin x H x W x D`` (or unbatched ``Cin x H x W x D``) and
    ``weight`` is ``Cout x Cin x k x k x k`` with odd ``k``.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 4
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-D input and weight, got {x.shape}, {weight.shape}")
    k = weight.shape[2]
    if weight.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeError(f"conv3d: kernel must be cubic with odd extent, got {weight.shape[2:]}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv3d: input has {x.shape[1]} channels but kernels expect {weight.shape[1]}")
    for ax in range(3):
        _out_extent(x.shape[2 + ax], k, stride, padding, ax)
    out = _conv(x, weight, stride, padding)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv3d: bias {bias.shape} does not match {weight.shape[0]} kernels")
        out = add(out, reshape(bias, (1, -1, 1, 1, 1)))
    return reshape(out, out.shape[1:]) if squeeze else out


def _conv(x, w, stride, pad):
    def backward(g, needs):
        gx = _conv_t(g, w, x.shape, stride, pad) if needs[0] else None
        gw = _conv_w(x, g, w.shape[2], stride, pad) if needs[1] else None
        return gx, gw

    data = kernels.conv3d_forward(x.data, w.data, stride, pad)
    return _make(data, (x, w), backward, "conv3d")


def _conv_t(g, w, in_shape, stride, pad):
    """Adjoint of conv3d in its input (transposed convolution)."""

    def backward(gg, needs):
        gy = _conv(gg, w, stride, pad) if needs[0] else None
        gw = _conv_w(gg, g, w.shape[2], stride, pad) if needs[1] else None
        return gy, gw

    data = kernels.conv3d_backward_input(g.data, w.data, in_shape, stride, pad)
    return _make(data, (g, w), backward, "conv3d_t")


def _conv_w(x, g, k, stride, pad):
    """Adjoint of conv3d in its kernels."""

    def backward(gw, needs):
        gx = _conv_t(g, gw, x.shape, stride, pad) if needs[0] else None
        gy = _conv(x, gw, stride, pad) if needs[1] else None
        return gx, gy

    data = kernels.conv3d_backward_weight(x.data, g.data, k, stride, pad)
    return _make(data, (x, g), backward, "conv3d_w")


def avgpool3d(x, size=2):
    """Non-overlapping mean pooling over the last three axes; remainders are dropped."""
    lead, sp = x.shape[:-3], x.shape[-3:]
    out_sp = tuple(s // size for s in sp)
    if min(out_sp) < 1:
        raise ShapeError(f"avgpool3d: extent {sp} smaller than window {size}")
    return _avgpool(x, size, lead, sp, out_sp)


def _avgpool(x, size, lead, sp, out_sp):
    def backward(g, needs):
        return (_avgpool_adjoint(g, size, lead, sp, out_sp),)

    crop = x.data[..., : out_sp[0] * size, : out_sp[1] * size, : out_sp[2] * size]
    blocks = crop.reshape(lead + (out_sp[0], size, out_sp[1], size, out_sp[2], size))
    nl = len(lead)
    data = blocks.mean(axis=(nl + 1, nl + 3, nl + 5))
    return _make(data, (x,), backward, "avgpool3d")


def _avgpool_adjoint(g, size, lead, sp, out_sp):
    def backward(gg, needs):
        return (_avgpool(gg, size, lead, sp, out_sp),)

    up = g.data
    for ax in range(3):
        up = np.repeat(up, size, axis=len(lead) + ax)
    data = np.zeros(lead + sp)
    data[..., : up.shape[-3], : up.shape[-2], : up.shape[-1]] = up / size ** 3
    return _make(data, (g,), backward, "avgpool3d_t")


def maxpool3d(x, size=2):
    """Non-overlapping max pooling; ties send the gradient to the first maximum."""
    lead, sp = x.shape[:-3], x.shape[-3:]
    out_sp = tuple(s // size for s in sp)
    if min(out_sp) < 1:
        raise ShapeError(f"maxpool3d: extent {sp} smaller than window {size}")
    nl = len(lead)
    idx = np.arange(x.size).reshape(x.shape)
    idx = idx[..., : out_sp[0] * size, : out_sp[1] * size, : out_sp[2] * size]
    idx = idx.reshape(lead + (out_sp[0], size, out_sp[1], size, out_sp[2], size))
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3, nl + 5)
    idx = idx.transpose(perm).reshape(lead + out_sp + (size ** 3,))
    vals = x.data.ravel()[idx]
    pick = np.take_along_axis(idx, vals.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    return gather_flat(x, pick, lead + out_sp)


def global_avgpool(x):
    """Mean over the three spatial axes of an ``N x C x H x W x D`` tensor."""
    return mean(x, axis=(2, 3, 4))
