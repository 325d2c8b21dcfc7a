import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ditl import losses, tensorcore as tc

from helpers import REL_TOL, gradcheck


def test_cross_entropy_uniform_is_ln2():
    ce = losses.cross_entropy(tc.Tensor([[0.5, 0.5]]), [[1.0, 0.0]]).item()
    assert abs(ce - math.log(2)) <= 1e-12


def test_cross_entropy_batch_mean():
    p = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    y = losses.one_hot([0, 1, 1])
    want = -(math.log(0.9) + math.log(0.8) + math.log(0.4)) / 3
    assert abs(losses.cross_entropy(tc.Tensor(p), y).item() - want) < 1e-15


def test_cross_entropy_floor_keeps_it_finite():
    ce = losses.cross_entropy(tc.Tensor([[1.0, 0.0]]), [[0.0, 1.0]]).item()
    assert ce == pytest.approx(-math.log(1e-12))


@pytest.mark.parametrize("heat,mask,want", [
    (np.ones((2, 2, 2)), np.ones((2, 2, 2)), 0.0),
    (np.zeros((2, 2, 2)), np.ones((2, 2, 2)), 1.0),
    (np.full((2, 2, 2), 0.5), np.ones((2, 2, 2)), 0.25),
])
def test_xai_loss_hand_cases(heat, mask, want):
    assert losses.xai_loss(tc.Tensor(heat), mask).item() == want


def test_xai_loss_mixed_mask():
    heat = np.zeros((1, 2, 2, 1))
    mask = np.array([1, 0, 0, 0.0]).reshape(1, 2, 2, 1)
    assert losses.xai_loss(tc.Tensor(heat), mask).item() == 0.25


def test_composite_lambda_zero_is_bitwise_cross_entropy():
    rng = np.random.default_rng(3)
    logits = tc.Tensor(rng.standard_normal((5, 2)), requires_grad=True)
    ce = losses.cross_entropy(tc.softmax(logits), losses.one_hot([0, 1, 1, 0, 1]))
    xai = losses.xai_loss(tc.Tensor(rng.random((5, 3, 3, 3))), rng.random((5, 3, 3, 3)) > 0.5)
    total = losses.composite(ce, 0.0, xai)
    assert total.data.tobytes() == ce.data.tobytes()
    assert losses.composite(ce, 0.0) is ce


def test_composite_weights_the_alignment_term():
    ce, xai = tc.Tensor(0.3), tc.Tensor(0.2)
    assert losses.composite(ce, 1.5, xai).item() == pytest.approx(0.6)


def test_loss_errors():
    with pytest.raises(losses.LossError):
        losses.composite(tc.Tensor(1.0), 1.0)
    with pytest.raises(losses.LossError):
        losses.composite(tc.Tensor(1.0), -0.1, tc.Tensor(0.0))
    with pytest.raises(losses.LossError):
        losses.xai_loss(tc.Tensor(np.zeros((2, 2))), np.zeros((2, 3)))
    with pytest.raises(losses.LossError):
        losses.cross_entropy(tc.Tensor([[0.5, 0.5]]), [[1.0, 0.0, 0.0]])
    with pytest.raises(losses.LossError):
        losses.one_hot([0, 2])
    with pytest.raises(losses.LossError):
        losses.LossConfig(lam=-1)


def test_phase_lambdas():
    assert [losses.lambda_for_phase(p) for p in ("step0", "Step 1", "step_2")] == [0.0, 1.0, 1.0]
    with pytest.raises(losses.LossError):
        losses.lambda_for_phase("step3")


def test_losses_gradcheck():
    rng = np.random.default_rng(11)
    logits = tc.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    y = losses.one_hot([1, 0, 0, 1])
    assert gradcheck(lambda: losses.cross_entropy(tc.softmax(logits), y), [logits]) < REL_TOL
    heat = tc.Tensor(rng.random((2, 3, 3, 2)), requires_grad=True)
    mask = rng.random((2, 3, 3, 2)) > 0.5
    assert gradcheck(lambda: losses.xai_loss(heat, mask), [heat]) < REL_TOL
    fn = lambda: losses.composite(losses.cross_entropy(tc.softmax(logits), y), 1.0,
                                  losses.xai_loss(tc.mul(heat, tc.tsum(logits)), mask))
    assert gradcheck(fn, [logits, heat]) < REL_TOL


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99))
def test_cross_entropy_is_negative_log(p):
    ce = losses.cross_entropy(tc.Tensor([[1 - p, p]]), [[0.0, 1.0]]).item()
    assert ce == pytest.approx(-math.log(p), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=27), st.integers(0, 2 ** 27 - 1))
def test_xai_loss_bounds(vals, bits):
    h = np.array(vals)
    m = np.array([(bits >> i) & 1 for i in range(h.size)], dtype=float)
    v = losses.xai_loss(tc.Tensor(h), m).item()
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(np.mean((h - m) ** 2), abs=1e-15)
