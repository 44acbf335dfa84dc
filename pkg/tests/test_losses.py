import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from semattnet.errors import DimensionError, EmptyMaskError, ValidationError
from semattnet.losses import LossWeights, lambda_schedule, masked_l2, metrics, total_loss


def test_masked_l2_examples():
    gt = torch.tensor([[2.0, 0.0], [4.0, 0.0]])
    pred = torch.tensor([[0.0, 100.0], [2.0, -7.0]])
    # valid residuals 2 and 2 -> mean square 4
    assert masked_l2(pred, gt).item() == 4.0
    assert masked_l2(torch.tensor([3.0, 1.0]), torch.tensor([1.0, 2.0])).item() == 2.5


def test_masked_l2_empty_mask():
    with pytest.raises(EmptyMaskError):
        masked_l2(torch.ones(3, 3), torch.zeros(3, 3))
    with pytest.raises(DimensionError):
        masked_l2(torch.ones(3, 3), torch.ones(3, 4))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), density=st.floats(0.05, 0.95))
def test_masked_l2_ignores_invalid_pixels(seed, density):
    rng = np.random.default_rng(seed)
    gt = np.where(rng.random((8, 8)) < density, rng.uniform(1, 80, (8, 8)), 0.0)
    if not (gt > 0).any():
        gt[0, 0] = 5.0
    pred = rng.uniform(0, 80, (8, 8))
    fuzzed = np.where(gt > 0, pred, rng.normal(0, 1e4, (8, 8)))
    a = masked_l2(torch.from_numpy(pred), torch.from_numpy(gt))
    b = masked_l2(torch.from_numpy(fuzzed), torch.from_numpy(gt))
    assert torch.equal(a, b)


def test_lambda_schedule():
    assert lambda_schedule(0) == (0.2, 0.2, 0.2)
    assert all(math.isclose(v, 0.1) for v in lambda_schedule(5))
    assert lambda_schedule(10) == (0.0, 0.0, 0.0)
    assert lambda_schedule(37) == (0.0, 0.0, 0.0)
    with pytest.raises(ValidationError):
        lambda_schedule(-1)


def test_total_loss_examples():
    # 0.2 * (1 + 2 + 3) + 0.4 = 1.6 at epoch 0
    assert math.isclose(total_loss(1.0, 2.0, 3.0, 0.4, epoch=0), 1.6)
    assert math.isclose(total_loss(1.0, 2.0, 3.0, 0.4, epoch=10), 0.4)
    assert math.isclose(total_loss(1.0, None, 3.0, 0.4, epoch=0), 1.2)
    with pytest.raises(ValidationError):
        total_loss(-1.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValidationError):
        total_loss(float("nan"), 0.0, 0.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(
    losses=st.lists(st.floats(0, 1e3), min_size=4, max_size=4),
    which=st.integers(0, 3),
    bump=st.floats(0, 1e3),
    epoch=st.integers(0, 20),
)
def test_total_loss_monotone(losses, which, bump, epoch):
    raised = list(losses)
    raised[which] += bump
    w = LossWeights(decay_end_epoch=10)
    assert total_loss(*raised, w=w, epoch=epoch) >= total_loss(*losses, w=w, epoch=epoch)


def test_metrics_single_pixel_example():
    m = metrics(np.array([[9.0, 3.0]]), np.array([[10.0, 0.0]]))
    assert abs(m["rmse_mm"] - 1000) <= 1e-3 and abs(m["mae_mm"] - 1000) <= 1e-3
    assert abs(m["irmse_per_km"] - 11.111) <= 1e-3 and abs(m["imae_per_km"] - 11.111) <= 1e-3


def test_metrics_exact_prediction_is_zero():
    gt = np.random.default_rng(0).uniform(1, 80, (6, 6))
    assert all(v == 0 for v in metrics(gt, gt).values())


def test_metrics_match_loop_oracle():
    rng = np.random.default_rng(1)
    gt = np.where(rng.random((10, 12)) < 0.4, rng.uniform(1, 80, (10, 12)), 0)
    pred = rng.uniform(0.5, 90, (10, 12))
    got, want = metrics(pred, gt), oracles.kitti_metrics(pred, gt)
    for k in want:
        assert math.isclose(got[k], want[k], rel_tol=1e-12)


def test_metrics_reject_nonpositive_prediction():
    with pytest.raises(ValidationError, match="2 of 3"):
        metrics(np.array([0.0, -1.0, 2.0]), np.array([1.0, 1.0, 1.0]))
    with pytest.raises(EmptyMaskError):
        metrics(np.ones(3), np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), s=st.floats(0.1, 10))
def test_metrics_symmetry_and_scaling(seed, s):
    rng = np.random.default_rng(seed)
    a = rng.uniform(1, 80, (5, 5))
    b = rng.uniform(1, 80, (5, 5))
    ab, ba = metrics(a, b), metrics(b, a)
    assert math.isclose(ab["rmse_mm"], ba["rmse_mm"], rel_tol=1e-12)
    assert math.isclose(ab["mae_mm"], ba["mae_mm"], rel_tol=1e-12)
    scaled = metrics(a * s, b * s)
    assert math.isclose(scaled["rmse_mm"], s * ab["rmse_mm"], rel_tol=1e-9)
    assert math.isclose(scaled["mae_mm"], s * ab["mae_mm"], rel_tol=1e-9)
