"""Classification loss, heatmap/mask alignment loss, and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

PROB_FLOOR = 1e-12
PHASE_LAMBDA = {"step0": 0.0, "step1": 1.0, "step2": 1.0}


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    lam: float = 1.0
    normalization: str = "minmax"
    second_order: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise LossError(f"lambda must be nonnegative, got {self.lam}")


def one_hot(labels, n_classes=2):
    labels = np.asarray(labels, dtype=int)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise LossError(f"labels outside 0..{n_classes - 1}")
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def cross_entropy(probs, target):
    """-sum_l y_l log(p_l), averaged over the batch when ``probs`` is N x L.

    ``target`` is one-hot with the same shape as ``probs``. Probabilities are
    floored at 1e-12 before the log.
    """
    probs = tc.as_tensor(probs)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if y.shape != probs.shape:
        raise LossError(f"label shape {y.shape} does not match probabilities {probs.shape}")
    nll = tc.neg(tc.tsum(tc.mul(Tensor(y), tc.log(tc.clamp_min(probs, PROB_FLOOR))), axis=-1))
    return tc.mean(nll) if nll.ndim else nll


def xai_loss(heatmap, mask):
    """Mean squared difference between heatmap and binary mask over all voxels."""
    heatmap = tc.as_tensor(heatmap)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if m.shape != heatmap.shape:
        raise LossError(f"mask extents {m.shape} differ from heatmap {heatmap.shape}")
    diff = tc.sub(Tensor(m), heatmap)
    return tc.mean(tc.mul(diff, diff))


def composite(cls_loss, lam, xai=None):
    """L_cls + lam * L_xai; with lam == 0 the classification loss is returned as is."""
    if lam < 0:
        raise LossError(f"lambda must be nonnegative, got {lam}")
    if lam == 0:
        return cls_loss
    if xai is None:
        raise LossError("lambda > 0 requires an alignment term (mask missing)")
    return tc.add(cls_loss, tc.mul(xai, float(lam)))


def lambda_for_phase(phase):
    key = str(phase).lower().replace(" ", "").replace("_", "")
    if key not in PHASE_LAMBDA:
        raise LossError(f"unknown phase {phase!r}")
    return PHASE_LAMBDA[key]
