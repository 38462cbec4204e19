"""Planted-structure datasets for end-to-end sanity experiments."""

from __future__ import annotations

import numpy as np

from .data import Dataset, RawRecord, split_dataset


def make_two_cluster_dataset(
    n_users: int = 200,
    n_items: int = 400,
    n_tags: int = 40,
    p_in: float = 0.3,
    p_cross: float = 0.0,
    seed: int = 7,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> Dataset:
    """Two user/item/tag clusters with dense in-cluster interactions.

    Users, items, and tags are split into two equal clusters. Each in-cluster
    (user, item) pair interacts with probability ``p_in`` (``p_cross``
    across clusters) and every interaction is annotated with a uniformly
    drawn tag from the user's cluster. The resulting assignments go through
    the standard split pipeline.
    """
    rng = np.random.default_rng(seed)
    user_cluster = (np.arange(n_users) * 2) // n_users
    item_cluster = (np.arange(n_items) * 2) // n_items
    tag_cluster = (np.arange(n_tags) * 2) // n_tags

    prob = np.where(
        user_cluster[:, None] == item_cluster[None, :], p_in, p_cross
    )
    interact = rng.random((n_users, n_items)) < prob
    users, items = np.nonzero(interact)

    records = []
    for u, i in zip(users, items):
        pool = np.nonzero(tag_cluster == user_cluster[u])[0]
        t = pool[rng.integers(len(pool))]
        records.append(RawRecord(f"u{u}", f"i{i}", f"t{t}"))

    meta = {
        "source": "synthetic-two-cluster",
        "n_users": n_users,
        "n_items": n_items,
        "n_tags": n_tags,
        "p_in": p_in,
        "p_cross": p_cross,
    }
    return split_dataset(records, ratios=ratios, seed=seed, meta=meta)
