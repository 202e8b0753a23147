"""Supervised L2, pairwise hinge, pyramid ranking aggregate and the mixed objective."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import torch

from .errors import InvalidInput, InvalidParameter


@dataclass
class LossBreakdown:
    supervised: float
    ranking: float
    total: float
    lam: float
    epsilon: float
    pair_terms: list = field(default_factory=list)
    n_pairs: int = 0

    def to_dict(self, with_pairs: bool = False) -> dict:
        d = {
            "supervised": self.supervised,
            "ranking": self.ranking,
            "total": self.total,
            "lambda": self.lam,
            "epsilon": self.epsilon,
            "n_pairs": self.n_pairs,
        }
        if with_pairs:
            d["pair_terms"] = self.pair_terms
        return d


def supervised_l2(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Half the squared pixel error summed per image, averaged over the batch."""
    if pred.shape != gt.shape:
        raise InvalidInput(f"prediction {tuple(pred.shape)} vs ground truth {tuple(gt.shape)}")
    if pred.dim() < 3 or pred.shape[0] < 1:
        raise InvalidInput("expected a non-empty batch of maps")
    n = pred.shape[0]
    return ((pred - gt) ** 2).sum() / (2 * n)


def margin_rank_pair(count_small, count_large, epsilon: float = 0.0):
    """max(0, small - large + epsilon). Accepts floats or tensors."""
    if epsilon < 0:
        raise InvalidParameter("margin must be non-negative")
    if isinstance(count_small, torch.Tensor) or isinstance(count_large, torch.Tensor):
        return torch.relu(torch.as_tensor(count_small) - count_large + epsilon)
    return max(0.0, count_small - count_large + epsilon)


def pair_indices(M: int) -> tuple[list[int], list[int]]:
    pairs = list(itertools.combinations(range(M + 1), 2))
    return [p[0] for p in pairs], [p[1] for p in pairs]


def pyramid_rank_loss(counts: torch.Tensor, epsilon: float = 0.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean hinge over all nested pairs.

    Parameters
    ----------
    counts : torch.Tensor
        Shape (N, K, M + 1); ``counts[i, k, m]`` is the count of patch m
        (0 = smallest, M = whole map) at level k of image i.
    epsilon : float
        Margin.

    Returns
    -------
    loss : torch.Tensor
        Scalar, ``sum(hinges) * 2 / (N K M (M + 1))``.
    hinges : torch.Tensor
        Per-pair hinge values, shape (N, K, M (M + 1) / 2).
    """
    if epsilon < 0:
        raise InvalidParameter("margin must be non-negative")
    if counts.dim() != 3:
        raise InvalidInput(f"counts must be (N, K, M+1), got shape {tuple(counts.shape)}")
    n, k, m1 = counts.shape
    if n < 1 or k < 1 or m1 < 2:
        raise InvalidInput(f"need N, K >= 1 and at least two patches, got {tuple(counts.shape)}")
    M = m1 - 1
    small, large = pair_indices(M)
    hinges = torch.relu(counts[..., small] - counts[..., large] + epsilon)
    return hinges.sum() * (2.0 / (n * k * M * (M + 1))), hinges


def total_loss(supervised, ranking, lam: float = 1.0):
    if lam < 0:
        raise InvalidParameter("lambda must be non-negative")
    return supervised + lam * ranking
