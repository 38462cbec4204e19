"""All-ranking top-K evaluation: Recall@K and NDCG@K over the full catalog.

Every user is scored against every item (training positives masked to
-inf), so metrics depend only on the induced ranking. Relevance for a split
is binary on (user, item) pairs: a held-out assignment makes its pair
relevant, duplicates collapse, and pairs that are also training positives
are excluded (they are masked out of the candidate set, so counting them
could only punish the masking). Users with no relevant items are skipped by
the macro average.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .boxes import BoxEmbedding, ScoringConfig, _log_softplus
from .objective import hard_volume_score, score
from .propagation import LayerState, propagate


@dataclass
class RankingResult:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    per_user: dict[int, dict] | None = None


def recall_at_k(ranked, relevant: set[int], k: int) -> float:
    """|top-K intersect relevant| / |relevant|."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not relevant:
        raise ValueError("relevant set is empty; caller should skip this user")
    hits = sum(1 for item in ranked[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant: set[int], k: int) -> float:
    """Binary-relevance NDCG with 1-indexed positions."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not relevant:
        raise ValueError("relevant set is empty; caller should skip this user")
    dcg = sum(
        1.0 / math.log2(pos + 1)
        for pos, item in enumerate(ranked[:k], start=1)
        if item in relevant
    )
    ideal = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


def _pairwise_scores(
    u_box: BoxEmbedding, item_boxes: BoxEmbedding, cfg: ScoringConfig, gumbel: bool
) -> torch.Tensor:
    if gumbel:
        return score(u_box, item_boxes, cfg)
    return hard_volume_score(u_box, item_boxes)


class _BulkScorer:
    """All-pairs scoring with the per-box work hoisted out of the chunk loop.

    Mathematically identical to :func:`boxrec.objective.score` per pair; the
    beta-scaled corner tensors are precomputed so each (users x items) chunk
    costs two ``logaddexp`` calls plus the softplus volume.
    """

    def __init__(self, state: LayerState, cfg: ScoringConfig, gumbel: bool):
        self.cfg = cfg
        self.gumbel = gumbel
        self.state = state
        if gumbel:
            beta = cfg.beta
            self.u_lo = (state.users.center - state.users.offset) / beta
            self.u_hi = -(state.users.center + state.users.offset) / beta
            self.i_lo = (state.items.center - state.items.offset) / beta
            self.i_hi = -(state.items.center + state.items.offset) / beta
            self.const = math.log(beta)

    def chunk(self, user_idx: torch.Tensor) -> torch.Tensor:
        """Scores for the users in ``user_idx`` against every item."""
        if not self.gumbel:
            u_box = BoxEmbedding(
                self.state.users.center[user_idx].unsqueeze(1),
                self.state.users.offset[user_idx].unsqueeze(1),
            )
            i_box = BoxEmbedding(
                self.state.items.center.unsqueeze(0),
                self.state.items.offset.unsqueeze(0),
            )
            return hard_volume_score(u_box, i_box)
        arg = torch.logaddexp(self.u_lo[user_idx].unsqueeze(1), self.i_lo)
        arg += torch.logaddexp(self.u_hi[user_idx].unsqueeze(1), self.i_hi)
        arg.neg_()
        arg -= 2.0 * self.cfg.euler_gamma
        return (_log_softplus(arg) + self.const).sum(dim=-1)


def rank_all(
    user: int,
    state: LayerState,
    train_positives: set[int],
    cfg: ScoringConfig,
    gumbel: bool = True,
) -> np.ndarray:
    """Full item ordering for one user, best first.

    Training positives are masked to -inf (they sink to the back); exact
    score ties break toward the lower item index.
    """
    with torch.no_grad():
        u_box = BoxEmbedding(
            state.users.center[user : user + 1], state.users.offset[user : user + 1]
        )
        scores = _pairwise_scores(u_box, state.items, cfg, gumbel)
        if train_positives:
            scores[list(train_positives)] = float("-inf")
        order = torch.argsort(-scores, stable=True)
    return order.numpy()


def relevant_items(dataset, split: str) -> dict[int, set[int]]:
    """Per-user relevant item sets for a split, minus training positives."""
    train_pos = dataset.train_positive_sets()
    out: dict[int, set[int]] = {}
    for u, _, i in dataset.split(split):
        u, i = int(u), int(i)
        if i not in train_pos[u]:
            out.setdefault(u, set()).add(i)
    return {u: items for u, items in out.items() if items}


def evaluate(
    params,
    ctg,
    dataset,
    split: str = "test",
    cfg: ScoringConfig | None = None,
    k_values: tuple[int, ...] = (10, 20),
    gumbel: bool = True,
    n_layers: int | None = None,
    chunk_size: int = 32,
    collect_per_user: bool = False,
) -> RankingResult:
    """Propagate once on the full training graph and rank every user.

    Macro-averages Recall@K and NDCG@K over users with at least one
    relevant item in ``split``; no stochastic components, so repeated calls
    are bit-identical.
    """
    if cfg is None:
        cfg = ScoringConfig()
    relevant = relevant_items(dataset, split)
    if not relevant:
        return RankingResult(
            recall={k: 0.0 for k in k_values},
            ndcg={k: 0.0 for k in k_values},
            n_users=0,
            per_user={} if collect_per_user else None,
        )
    with torch.no_grad():
        state = propagate(params, ctg, n_layers)
        scorer = _BulkScorer(state, cfg, gumbel)
    train_pos = dataset.train_positive_sets()
    users = sorted(relevant)
    max_k = max(k_values)
    recall_sum = {k: 0.0 for k in k_values}
    ndcg_sum = {k: 0.0 for k in k_values}
    per_user: dict[int, dict] = {}

    for start in range(0, len(users), chunk_size):
        chunk = users[start : start + chunk_size]
        idx = torch.tensor(chunk, dtype=torch.long)
        with torch.no_grad():
            scores = scorer.chunk(idx)  # (chunk, n_items)
            for row, u in enumerate(chunk):
                if train_pos[u]:
                    scores[row, list(train_pos[u])] = float("-inf")
            top = torch.argsort(-scores, dim=1, stable=True)[:, :max_k].numpy()
        for row, u in enumerate(chunk):
            ranked = top[row]
            rel = relevant[u]
            user_metrics = {}
            for k in k_values:
                r = recall_at_k(ranked, rel, k)
                n = ndcg_at_k(ranked, rel, k)
                recall_sum[k] += r
                ndcg_sum[k] += n
                user_metrics[f"recall@{k}"] = r
                user_metrics[f"ndcg@{k}"] = n
            if collect_per_user:
                per_user[u] = user_metrics

    n = len(users)
    return RankingResult(
        recall={k: recall_sum[k] / n for k in k_values},
        ndcg={k: ndcg_sum[k] / n for k in k_values},
        n_users=n,
        per_user=per_user if collect_per_user else None,
    )


def write_metrics_report(
    path, result: RankingResult, split: str, config: dict | None = None
) -> None:
    """Deterministic JSON report of one evaluation run."""
    doc = {
        "split": split,
        "n_users": result.n_users,
        "recall": {str(k): v for k, v in result.recall.items()},
        "ndcg": {str(k): v for k, v in result.ndcg.items()},
        "config": config,
    }
    if result.per_user is not None:
        doc["per_user"] = {str(u): m for u, m in result.per_user.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
