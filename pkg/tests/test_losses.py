import numpy as np
import pytest
import torch

from rankpyr.errors import InvalidInput, InvalidParameter
from rankpyr.losses import (
    LossBreakdown,
    margin_rank_pair,
    pyramid_rank_loss,
    supervised_l2,
    total_loss,
)


def brute_pyramid(counts, eps):
    """Explicit loops over images, levels and ordered pairs."""
    n, k, m1 = counts.shape
    M = m1 - 1
    total = 0.0
    for i in range(n):
        for lv in range(k):
            for m in range(M):
                for q in range(m + 1, M + 1):
                    total += max(0.0, counts[i, lv, m] - counts[i, lv, q] + eps)
    return total * 2.0 / (n * k * M * (M + 1))


def test_supervised_identity():
    x = torch.rand(3, 1, 8, 8)
    assert supervised_l2(x, x.clone()).item() == 0.0


def test_supervised_arithmetic():
    gt = torch.zeros(1, 1, 4, 4)
    pred = gt.clone()
    pred[0, 0, 0, 0] = 3
    pred[0, 0, 2, 1] = -4
    assert supervised_l2(pred, gt).item() == pytest.approx(12.5)


def test_supervised_duplicated_batch():
    pred, gt = torch.rand(2, 1, 5, 5), torch.rand(2, 1, 5, 5)
    a = supervised_l2(pred, gt)
    b = supervised_l2(torch.cat([pred, pred]), torch.cat([gt, gt]))
    assert a.item() == pytest.approx(b.item(), rel=1e-6)


def test_supervised_shape_mismatch():
    with pytest.raises(InvalidInput):
        supervised_l2(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


@pytest.mark.parametrize("small,large,eps,expected", [(3, 5, 0, 0), (5, 3, 0, 2), (5, 5, 1, 1), (5, 5, 0, 0)])
def test_pair_hinge(small, large, eps, expected):
    assert margin_rank_pair(small, large, eps) == expected
    t = margin_rank_pair(torch.tensor(float(small)), torch.tensor(float(large)), eps)
    assert t.item() == expected


def test_pair_negative_margin():
    with pytest.raises(InvalidParameter):
        margin_rank_pair(1.0, 2.0, -0.1)


def test_monotone_counts_zero_loss():
    counts = torch.arange(15, dtype=torch.float64).view(1, 3, 5) * 2
    loss, hinges = pyramid_rank_loss(counts, epsilon=1.0)
    assert loss.item() == 0.0
    assert hinges.shape == (1, 3, 10)


def test_normalizer_all_unit_hinges():
    # equal counts with eps=1 make each of the 30 hinges exactly 1
    counts = torch.zeros(1, 3, 5, dtype=torch.float64)
    loss, hinges = pyramid_rank_loss(counts, epsilon=1.0)
    assert hinges.sum().item() == 30
    assert loss.item() == 1.0


def test_single_pair_normalizer():
    loss, _ = pyramid_rank_loss(torch.tensor([[[2.0, 1.0]]], dtype=torch.float64), 0.0)
    assert loss.item() == 1.0


def test_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, k, M = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 6)
        c = rng.normal(size=(n, k, M + 1)) * 5
        eps = float(rng.choice([0.0, 0.5, 2.0]))
        got = pyramid_rank_loss(torch.from_numpy(c), eps)[0].item()
        assert got == pytest.approx(brute_pyramid(c, eps), abs=1e-9)


def test_batch_replication_invariant():
    c = torch.randn(2, 3, 5, dtype=torch.float64)
    a = pyramid_rank_loss(c)[0]
    b = pyramid_rank_loss(torch.cat([c, c, c]))[0]
    assert a.item() == pytest.approx(b.item(), abs=1e-12)


def test_bad_count_shape():
    with pytest.raises(InvalidInput):
        pyramid_rank_loss(torch.zeros(3, 5))
    with pytest.raises(InvalidInput):
        pyramid_rank_loss(torch.zeros(1, 3, 1))


def test_zero_gradient_when_consistent():
    c = (torch.arange(10, dtype=torch.float64).view(1, 2, 5) * 3).requires_grad_()
    loss, _ = pyramid_rank_loss(c, epsilon=1.0)
    loss.backward()
    assert torch.equal(c.grad, torch.zeros_like(c))


def test_total_loss():
    assert total_loss(2.0, 0.5, 4.0) == 4.0
    assert total_loss(2.0, 0.5, 0.0) == 2.0
    with pytest.raises(InvalidParameter):
        total_loss(1.0, 1.0, -1.0)


def test_breakdown_dict():
    b = LossBreakdown(1.0, 0.5, 1.5, 1.0, 0.0, [0.0, 0.5], 2)
    d = b.to_dict()
    assert d["total"] == d["supervised"] + d["lambda"] * d["ranking"]
    assert "pair_terms" not in d and b.to_dict(True)["pair_terms"] == [0.0, 0.5]
