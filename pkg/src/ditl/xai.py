"""Grad-CAM heatmaps on the imaging branch and exact Shapley attributions."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from . import tensorcore as tc
from .models import forward
from .tensorcore import Tensor

NORMALIZATIONS = ("minmax", "max", "none")
MAX_EXACT_FEATURES = 12
SHAPLEY_CHUNK = 32


class UnsupportedOperation(TypeError):
    pass


def normalize_heatmap(raw, mode="minmax"):
    """Per-sample rescaling of ``raw`` (N x H x W x D) into [0, 1].

    ``minmax`` maps min to 0 and max to 1. A constant map becomes all ones when
    positive and all zeros when it is identically zero.
    """
    if mode == "none":
        return raw
    axes = tuple(range(1, raw.ndim))
    mx = tc.amax(raw, axes)
    top = mx.data > 0
    if mode == "max":
        denom = tc.add(tc.mul(mx, Tensor(top * 1.0)), Tensor((~top) * 1.0))
        return tc.div(raw, denom)
    if mode != "minmax":
        raise ValueError(f"unknown heatmap normalization {mode!r}")
    mn = tc.amin(raw, axes)
    spread = tc.sub(mx, mn)
    varies = spread.data > 0
    flat_pos = ~varies & top
    flat_zero = ~varies & ~top
    offset = tc.mul(mn, Tensor(varies * 1.0))
    denom = tc.add(tc.add(tc.mul(spread, Tensor(varies * 1.0)), tc.mul(mx, Tensor(flat_pos * 1.0))),
                   Tensor(flat_zero * 1.0))
    return tc.div(tc.sub(raw, offset), denom)


def gradcam_from_output(out, target, create_graph=False, normalize="minmax"):
    """Heatmaps from a forward pass whose target-layer maps are graph nodes.

    ``target`` holds one class index per sample. Because samples do not
    interact, the gradient of the summed target logits gives every sample its
    own per-class gradient in a single backward pass.
    """
    act = out.activations
    if act is None or not act.requires_grad:
        raise UnsupportedOperation("forward pass did not track the target layer")
    target = np.asarray(target, dtype=int).reshape(-1)
    pick = np.zeros(out.logits.shape)
    pick[np.arange(len(target)), target] = 1.0
    score = tc.tsum(tc.mul(out.logits, Tensor(pick)))
    d_act = tc.grad(score, act, create_graph=create_graph)
    weights = tc.mean(d_act, axis=(2, 3, 4), keepdims=True)
    raw = tc.relu(tc.tsum(tc.mul(weights, act), axis=1))
    return normalize_heatmap(raw, normalize)


def gradcam(model, x_img, x_clin=None, target=None, create_graph=False, normalize="minmax"):
    """Grad-CAM on the first convolution of ``model``.

    Returns an ``N x H x W x D`` tensor in [0, 1] on the input grid. With
    ``create_graph`` the heatmap stays differentiable in the model parameters
    through the channel weights too; otherwise the weights are constants.
    ``target`` defaults to the predicted class.
    """
    if model.kind in ("unimodal-clinical", "late") or not model.has_imaging:
        raise UnsupportedOperation(f"Grad-CAM needs a convolutional branch; {model.kind} has none")
    with tc.set_grad_enabled(True):
        out = forward(model, x_img, x_clin, track_target=True)
        if target is None:
            target = out.probs.data.argmax(axis=1)
        return gradcam_from_output(out, target, create_graph, normalize)


def resize_heatmap(heat, extents):
    """Trilinear resampling of an ``H x W x D`` (or batched) map onto ``extents``."""
    h = np.asarray(heat.data if isinstance(heat, Tensor) else heat, dtype=np.float64)
    extents = tuple(int(e) for e in extents)
    if any(e <= 0 for e in extents):
        raise ValueError(f"target extents must be positive, got {extents}")
    if h.ndim == 4:
        return np.stack([resize_heatmap(v, extents) for v in h])
    if h.shape == extents:
        return h.copy()
    # align voxel centres of the source and target grids
    axes = [
        (np.arange(t) + 0.5) * (s / t) - 0.5 for s, t in zip(h.shape, extents)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([np.clip(g, 0, s - 1) for g, s in zip(grid, h.shape)])
    return map_coordinates(h, coords, order=1, mode="nearest")


# ---------------------------------------------------------------------------
# Shapley attribution


@dataclass
class AttributionReport:
    names: list
    values: np.ndarray
    baseline: float
    prediction: float
    ranking: list = field(default_factory=list)

    @property
    def efficiency_gap(self):
        return float(self.values.sum() - (self.prediction - self.baseline))

    def rows(self):
        for i in self.ranking:
            yield self.names[i], float(self.values[i])


def exact_shapley(value_fn, x, background, names=None, groups=None,
                  max_features=MAX_EXACT_FEATURES):
    """Exact Shapley values of ``value_fn`` at ``x`` by full coalition enumeration.

    Players are the columns of ``x``, or the column groups in ``groups`` (for
    example all one-hot columns of one categorical variable). Absent players
    take the mean of ``background``. ``value_fn`` maps an ``M x F`` matrix to
    ``M`` scalars; all ``2^P`` coalitions go through it in one call.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    base = np.asarray(background, dtype=np.float64)
    base = base.mean(axis=0) if base.ndim == 2 else base.ravel()
    if base.size != x.size:
        raise ValueError(f"background has {base.size} features, sample has {x.size}")
    if groups is None:
        groups = [[j] for j in range(x.size)]
    groups = [list(g) for g in groups]
    cols = sorted(j for g in groups for j in g)
    if cols != list(range(x.size)):
        raise ValueError("groups must partition the feature columns")
    n = len(groups)
    if n > max_features:
        raise ValueError(
            f"exact Shapley enumeration is limited to {max_features} players (got {n}); "
            "group columns or attribute a subset")
    masks = np.array(list(itertools.product((0, 1), repeat=n)), dtype=bool)
    owner = np.empty(x.size, dtype=int)
    for k, g in enumerate(groups):
        owner[g] = k
    rows = np.where(masks[:, owner], x, base)
    vals = np.asarray(value_fn(rows), dtype=np.float64).ravel()
    if vals.size != len(masks):
        raise ValueError(f"value function returned {vals.size} values for {len(masks)} rows")
    # coalition index = binary number with player 0 as the most significant bit
    weights = 1 << np.arange(n - 1, -1, -1)
    codes = masks.astype(int) @ weights
    sizes = masks.sum(axis=1)
    coef = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
                     for s in range(n)])
    phi = np.zeros(n)
    for j in range(n):
        without = ~masks[:, j]
        gain = vals[codes[without] + weights[j]] - vals[codes[without]]
        phi[j] = np.sum(coef[sizes[without]] * gain)
    names = list(names) if names is not None else [f"x{j}" for j in range(n)]
    if len(names) != n:
        raise ValueError(f"{len(names)} names for {n} players")
    ranking = sorted(range(n), key=lambda j: (-abs(phi[j]), j))
    return AttributionReport(names, phi, float(vals[0]), float(vals[-1]), ranking)


def clinical_value_fn(model, x_img=None, cls=1):
    """Positive-class probability as a function of the clinical vector alone.

    For models with an imaging branch the image is held fixed at ``x_img``.
    """
    if not model.has_clinical:
        raise UnsupportedOperation(f"{model.kind} has no clinical branch")

    cache = {}

    def image_features():
        if "z" not in cache:
            with tc.no_grad():
                cache["z"] = model.modules["ct"](Tensor(np.asarray(x_img)[None]))[0].data
        return cache["z"]

    def value(rows):
        rows = np.asarray(rows, dtype=np.float64)
        if model.has_imaging and x_img is None:
            raise ValueError("an image is required to attribute a multimodal model")
        model.eval()
        out = []
        with tc.no_grad():
            if model.kind == "intermediate":
                z_i = Tensor(np.repeat(image_features(), len(rows), axis=0))
                z_c = model.modules["clinical"](Tensor(rows))
                logits = model.modules["head"](tc.concat([z_i, z_c], axis=1))
                return tc.softmax(logits, axis=-1).data[:, cls]
            for s in range(0, len(rows), SHAPLEY_CHUNK):
                part = rows[s:s + SHAPLEY_CHUNK]
                img = None
                if model.has_imaging:
                    img = np.repeat(np.asarray(x_img)[None], len(part), axis=0)
                out.append(forward(model, img, part).probs.data[:, cls])
        return np.concatenate(out)

    return value
