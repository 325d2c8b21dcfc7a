"""Float64 tensors, reverse-mode autodiff with higher-order support, and 3-D conv kernels."""
from .kernels import BACKEND
from .tensor import (
    GraphError,
    ShapeError,
    Tensor,
    add,
    amax,
    amin,
    as_tensor,
    avgpool3d,
    broadcast_to,
    clamp_min,
    concat,
    conv3d,
    dense,
    div,
    exp,
    flatten,
    gather_flat,
    getitem,
    global_avgpool,
    grad,
    is_grad_enabled,
    log,
    matmul,
    maxpool3d,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    set_grad_enabled,
    softmax,
    sub,
    transpose,
    tsum,
)
from .io import load, save
from .alloc import tune_allocator

__all__ = [name for name in dir() if not name.startswith("_")]
