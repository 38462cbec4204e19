"""Preference scores from box overlap, and the pairwise ranking loss.

The score of a (user, item) pair is the log of the Gumbel-smoothed volume of
their box intersection. ``hard_volume_score`` is the ablation variant that
measures the literal overlap of the hard boxes (floored, so disjoint pairs
carry no gradient); the smoothed score converges to it as beta -> 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .boxes import BoxEmbedding, ScoringConfig, gumbel_corners, gumbel_intersection, log_volume

HARD_VOLUME_FLOOR = 1e-12


@dataclass(frozen=True)
class TripleBatch:
    """(user, positive item, negative item) index triples.

    Positives come from the user's training interactions; negatives must
    not. The sampler guarantees this; it is not re-checked here.
    """

    users: Tensor
    pos_items: Tensor
    neg_items: Tensor

    def __post_init__(self) -> None:
        if not (len(self.users) == len(self.pos_items) == len(self.neg_items)):
            raise ValueError(
                f"triple columns disagree in length: {len(self.users)}, "
                f"{len(self.pos_items)}, {len(self.neg_items)}"
            )

    def __len__(self) -> int:
        return len(self.users)


def score(u_box: BoxEmbedding, i_box: BoxEmbedding, cfg: ScoringConfig) -> Tensor:
    """log Vol of the Gumbel intersection of a user box and an item box.

    Symmetric in its two arguments and invariant under joint translation;
    broadcasts over leading batch dimensions.
    """
    corners = gumbel_intersection(gumbel_corners(u_box), gumbel_corners(i_box), cfg)
    return log_volume(corners, cfg)


def hard_volume_score(u_box: BoxEmbedding, i_box: BoxEmbedding) -> Tensor:
    """Log overlap volume of the hard boxes, floored at 1e-12 per dimension."""
    lo = torch.maximum(u_box.center - u_box.offset, i_box.center - i_box.offset)
    hi = torch.minimum(u_box.center + u_box.offset, i_box.center + i_box.offset)
    overlap = (hi - lo).clamp_min(HARD_VOLUME_FLOOR)
    return overlap.log().sum(dim=-1)


def bpr_loss(
    batch: TripleBatch,
    scores_pos: Tensor,
    scores_neg: Tensor,
    params,
    reg_lambda: float,
) -> Tensor:
    """Pairwise ranking loss: sum of softplus(-(pos - neg)) plus L2.

    -log sigmoid(x) is evaluated as softplus(-x), which is stable for large
    margins of either sign. The L2 term covers the embedding rows touched by
    the batch (per occurrence) plus the attention parameters, divided by the
    batch size.
    """
    if scores_pos.shape != scores_neg.shape or len(scores_pos) != len(batch):
        raise ValueError(
            f"expected {len(batch)} aligned positive/negative scores, got "
            f"{tuple(scores_pos.shape)} and {tuple(scores_neg.shape)}"
        )
    pair_loss = torch.nn.functional.softplus(scores_neg - scores_pos).sum()
    reg = params.batch_l2(batch.users, batch.pos_items, batch.neg_items)
    return pair_loss + reg_lambda * reg / len(batch)
