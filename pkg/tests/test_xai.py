import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ditl import losses, tensorcore as tc, xai
from ditl.training import TrainConfig, batch_loss

from conftest import TINY_EXTENTS, tiny_model, toy_split
from helpers import REL_TOL, gradcheck


# --- heatmaps ------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["unimodal-ct", "early", "intermediate"])
@pytest.mark.parametrize("mode", xai.NORMALIZATIONS)
def test_gradcam_grid_and_range(kind, mode, split):
    m = tiny_model(kind).eval()
    heat = xai.gradcam(m, split.images, split.clinical, normalize=mode).data
    assert heat.shape == (len(split),) + TINY_EXTENTS
    assert heat.min() >= 0
    if mode != "none":
        assert heat.max() <= 1.0 + 1e-12


def test_gradcam_rejects_models_without_imaging(split):
    for m in (tiny_model("unimodal-clinical"),):
        with pytest.raises(xai.UnsupportedOperation):
            xai.gradcam(m, split.images, split.clinical)


def test_gradcam_by_hand():
    # single linear channel: heatmap equals relu(w * A) with w the mean gradient
    m = tiny_model("unimodal-ct", norm="none").eval()
    x = toy_split(n=2).images
    out = m(x, track_target=True)
    a = out.activations
    g = tc.grad(tc.tsum(tc.mul(out.logits, tc.Tensor(np.eye(2)[[1, 1]]))), a).data
    raw = np.maximum((g.mean(axis=(2, 3, 4), keepdims=True) * a.data).sum(axis=1), 0)
    want = (raw - raw.min(axis=(1, 2, 3), keepdims=True)) / np.ptp(raw, axis=(1, 2, 3), keepdims=True)
    got = xai.gradcam(m, x, target=[1, 1]).data
    assert np.allclose(got, want, atol=1e-12)


def test_normalize_constant_maps():
    raw = tc.Tensor(np.stack([np.full((2, 2, 2), 3.0), np.zeros((2, 2, 2))]))
    out = xai.normalize_heatmap(raw, "minmax").data
    assert np.all(out[0] == 1.0) and np.all(out[1] == 0.0)
    out = xai.normalize_heatmap(raw, "max").data
    assert np.all(out[0] == 1.0) and np.all(out[1] == 0.0)
    with pytest.raises(ValueError):
        xai.normalize_heatmap(raw, "softmax")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_minmax_spans_unit_interval(seed):
    raw = np.random.default_rng(seed).random((2, 3, 3, 2))
    out = xai.normalize_heatmap(tc.Tensor(raw)).data
    assert np.allclose(out.min(axis=(1, 2, 3)), 0) and np.allclose(out.max(axis=(1, 2, 3)), 1)


def test_resize_heatmap():
    h = np.random.default_rng(0).random((3, 3, 2))
    assert np.array_equal(xai.resize_heatmap(h, (3, 3, 2)), h)
    up = xai.resize_heatmap(h, (6, 6, 4))
    assert up.shape == (6, 6, 4) and up.min() >= h.min() - 1e-12 and up.max() <= h.max() + 1e-12
    assert np.allclose(xai.resize_heatmap(np.ones((2, 2, 2)), (5, 5, 5)), 1.0)
    with pytest.raises(ValueError):
        xai.resize_heatmap(h, (0, 3, 3))


# --- composite loss through Grad-CAM ----------------------------------------------------

@pytest.mark.parametrize("norm", ["batch", "none"])
@pytest.mark.parametrize("kind", ["unimodal-ct", "intermediate"])
def test_composite_second_order_gradcheck(kind, norm):
    batch = toy_split(n=3, seed=4)
    m = tiny_model(kind, norm=norm, seed=2).train()
    cfg = TrainConfig(second_order=True)
    leaves = [p for p in m.parameters() if p.requires_grad]
    fn = lambda: batch_loss(m, batch, 1.0, "m2", cfg)[0]
    assert gradcheck(fn, leaves) < REL_TOL


def test_first_order_mode_treats_channel_weights_as_constants():
    batch = toy_split(n=3, seed=4)
    m = tiny_model("unimodal-ct", norm="none", seed=2)
    leaves = [p for p in m.parameters() if p.requires_grad]
    full = tc.grad(batch_loss(m, batch, 1.0, "m2", TrainConfig(second_order=True))[0], leaves)
    first = tc.grad(batch_loss(m, batch, 1.0, "m2", TrainConfig(second_order=False))[0], leaves)
    assert any(not np.allclose(a.data, b.data) for a, b in zip(full, first))


# --- Shapley --------------------------------------------------------------------------------

def test_linear_model_closed_form():
    rng = np.random.default_rng(0)
    w, c = rng.standard_normal(6), 0.4
    x, bg = rng.standard_normal(6), rng.standard_normal((10, 6))
    rep = xai.exact_shapley(lambda r: r @ w + c, x, bg)
    assert np.max(np.abs(rep.values - w * (x - bg.mean(axis=0)))) < 1e-8
    assert abs(rep.efficiency_gap) < 1e-8


def brute_shapley(f, x, base):
    n = len(x)
    phi = np.zeros(n)
    for j in range(n):
        others = [i for i in range(n) if i != j]
        for r in range(n):
            for s in itertools.combinations(others, r):
                z = base.copy()
                z[list(s)] = x[list(s)]
                without = f(z[None])[0]
                z[j] = x[j]
                phi[j] += math.factorial(r) * math.factorial(n - r - 1) / math.factorial(n) * (f(z[None])[0] - without)
    return phi


def test_nonlinear_matches_brute_force():
    f = lambda r: np.tanh(r[:, 0] * r[:, 1]) + r[:, 2] ** 2 - r[:, 0] * r[:, 3]
    x = np.array([0.5, -1.2, 0.8, 2.0])
    base = np.array([0.1, 0.3, -0.4, 0.0])
    rep = xai.exact_shapley(f, x, base)
    assert np.max(np.abs(rep.values - brute_shapley(f, x, base))) < 1e-12
    assert abs(rep.efficiency_gap) < 1e-12


def test_symmetry_and_null_player():
    f = lambda r: r[:, 0] * r[:, 1] + 0.0 * r[:, 2]
    rep = xai.exact_shapley(f, np.array([1.0, 1.0, 5.0]), np.zeros(3), names=["a", "b", "c"])
    assert rep.values[0] == pytest.approx(rep.values[1])
    assert rep.values[2] == 0.0
    assert [n for n, _ in rep.rows()][-1] == "c"


def test_grouped_players():
    w = np.array([1.0, 2.0, 3.0, 4.0])
    x, base = np.ones(4), np.zeros(4)
    rep = xai.exact_shapley(lambda r: r @ w, x, base, groups=[[0, 1], [2], [3]])
    assert np.allclose(rep.values, [3.0, 3.0, 4.0])
    with pytest.raises(ValueError):
        xai.exact_shapley(lambda r: r @ w, x, base, groups=[[0, 1], [1, 2, 3]])


def test_player_limit():
    with pytest.raises(ValueError):
        xai.exact_shapley(lambda r: r.sum(1), np.zeros(13), np.zeros(13))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 7), st.integers(0, 10_000))
def test_efficiency_property(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    f = lambda r: np.sin(r @ a).sum(axis=1)
    rep = xai.exact_shapley(f, rng.standard_normal(n), rng.standard_normal((5, n)))
    assert abs(rep.efficiency_gap) < 1e-8


@pytest.mark.parametrize("kind", ["unimodal-clinical", "intermediate", "early"])
def test_clinical_value_fn_matches_forward(kind, split):
    m = tiny_model(kind).eval()
    img = split.images[0]
    f = xai.clinical_value_fn(m, img if m.has_imaging else None)
    want = m(split.images[:1].repeat(3, 0) if m.has_imaging else None, split.clinical[:3]).probs.data[:, 1]
    assert np.allclose(f(split.clinical[:3]), want, atol=1e-12)
    rep = xai.exact_shapley(f, split.clinical[0], split.clinical)
    assert abs(rep.efficiency_gap) < 1e-8


def test_clinical_value_fn_needs_clinical_branch(split):
    with pytest.raises(xai.UnsupportedOperation):
        xai.clinical_value_fn(tiny_model("unimodal-ct"))
