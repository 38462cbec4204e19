"""The collaborative tag graph: a tripartite user-item-tag adjacency.

Every tagging triplet (u, t, i) contributes three undirected edges, one per
relation: user-item (r0), user-tag (r1), and item-tag (r2). Edges are
deduplicated and stored lexicographically sorted, which makes construction
deterministic; neighbor lists are ascending by id.

``dropout_view`` produces a read-only view with a random fraction of nodes
masked (all incident edges removed), used as a per-batch regularizer during
training. The underlying graph is never modified.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch


class Assignment(NamedTuple):
    """One tagging event: user ``user_id`` annotates item ``item_id`` with tag ``tag_id``."""

    user_id: int
    tag_id: int
    item_id: int


def _unique_edges(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Deduplicated (E, 2) edge array, lexicographically sorted."""
    if len(a) == 0:
        return np.empty((0, 2), dtype=np.int64)
    return np.unique(np.stack([a, b], axis=1), axis=0).astype(np.int64)


def _neighbor_lists(edges: np.ndarray, col: int, n: int) -> list[np.ndarray]:
    """Per-node neighbor arrays (ascending) keyed by the node ids in ``col``."""
    out: list[np.ndarray] = [np.empty(0, dtype=np.int64) for _ in range(n)]
    if len(edges) == 0:
        return out
    order = np.argsort(edges[:, col], kind="stable")
    keys = edges[order, col]
    vals = edges[order, 1 - col]
    bounds = np.searchsorted(keys, np.arange(n + 1))
    for node in range(n):
        lo, hi = bounds[node], bounds[node + 1]
        if hi > lo:
            out[node] = np.sort(vals[lo:hi])
    return out


class CollaborativeTagGraph:
    """Tripartite graph over users, items, and tags with typed edge sets.

    Read-only after construction; concurrent readers are safe. Use
    :func:`build_ctg` rather than the constructor.
    """

    def __init__(
        self,
        n_users: int,
        n_items: int,
        n_tags: int,
        ui: np.ndarray,
        ut: np.ndarray,
        it: np.ndarray,
    ):
        self.n_users = n_users
        self.n_items = n_items
        self.n_tags = n_tags
        self.ui = ui  # (E0, 2) columns (user, item)
        self.ut = ut  # (E1, 2) columns (user, tag)
        self.it = it  # (E2, 2) columns (item, tag)
        self._user_items = _neighbor_lists(ui, 0, n_users)
        self._item_users = _neighbor_lists(ui, 1, n_items)
        self._user_tags = _neighbor_lists(ut, 0, n_users)
        self._tag_users = _neighbor_lists(ut, 1, n_tags)
        self._item_tags = _neighbor_lists(it, 0, n_items)
        self._tag_items = _neighbor_lists(it, 1, n_tags)
        self._tensor_cache: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items + self.n_tags

    def user_items(self, u: int) -> np.ndarray:
        return self._user_items[u]

    def user_tags(self, u: int) -> np.ndarray:
        return self._user_tags[u]

    def item_users(self, i: int) -> np.ndarray:
        return self._item_users[i]

    def item_tags(self, i: int) -> np.ndarray:
        return self._item_tags[i]

    def tag_users(self, t: int) -> np.ndarray:
        return self._tag_users[t]

    def tag_items(self, t: int) -> np.ndarray:
        return self._tag_items[t]

    def edge_tensors(self, relation: str) -> tuple[torch.Tensor, torch.Tensor]:
        """Edge endpoint index tensors for ``relation`` in {"ui", "ut", "it"}."""
        if relation not in self._tensor_cache:
            edges = getattr(self, relation)
            self._tensor_cache[relation] = (
                torch.from_numpy(np.ascontiguousarray(edges[:, 0])),
                torch.from_numpy(np.ascontiguousarray(edges[:, 1])),
            )
        return self._tensor_cache[relation]


def build_ctg(
    assignments: list[Assignment] | np.ndarray,
    counts: tuple[int, int, int],
) -> CollaborativeTagGraph:
    """Build the graph from (user, tag, item) triplets.

    ``counts`` is (n_users, n_items, n_tags). Duplicate edges collapse; an
    out-of-range index raises ``ValueError`` naming the offending triplet.
    """
    n_users, n_items, n_tags = counts
    arr = np.asarray(assignments, dtype=np.int64).reshape(-1, 3)
    if len(arr) > 0:
        u, t, i = arr[:, 0], arr[:, 1], arr[:, 2]
        bad = (u < 0) | (u >= n_users) | (t < 0) | (t >= n_tags) | (i < 0) | (i >= n_items)
        if bad.any():
            k = int(np.argmax(bad))
            raise ValueError(
                f"assignment (u={arr[k, 0]}, t={arr[k, 1]}, i={arr[k, 2]}) has an "
                f"index outside counts (users={n_users}, items={n_items}, tags={n_tags})"
            )
        ui = _unique_edges(u, i)
        ut = _unique_edges(u, t)
        it = _unique_edges(i, t)
    else:
        ui = ut = it = np.empty((0, 2), dtype=np.int64)
    return CollaborativeTagGraph(n_users, n_items, n_tags, ui, ut, it)


class DropoutView:
    """A node-dropout view of a graph: masked nodes lose all incident edges.

    Exposes the same read interface as :class:`CollaborativeTagGraph`; the
    base graph is untouched and may back any number of concurrent views.
    """

    def __init__(self, base: CollaborativeTagGraph, keep_user, keep_item, keep_tag):
        self.base = base
        self.n_users = base.n_users
        self.n_items = base.n_items
        self.n_tags = base.n_tags
        self._keep_u = keep_user
        self._keep_i = keep_item
        self._keep_t = keep_tag
        self.ui = base.ui[keep_user[base.ui[:, 0]] & keep_item[base.ui[:, 1]]]
        self.ut = base.ut[keep_user[base.ut[:, 0]] & keep_tag[base.ut[:, 1]]]
        self.it = base.it[keep_item[base.it[:, 0]] & keep_tag[base.it[:, 1]]]
        self._tensor_cache: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}

    @property
    def n_nodes(self) -> int:
        return self.base.n_nodes

    def _filter(self, node_kept: bool, neighbors: np.ndarray, keep) -> np.ndarray:
        if not node_kept:
            return np.empty(0, dtype=np.int64)
        return neighbors[keep[neighbors]]

    def user_items(self, u: int) -> np.ndarray:
        return self._filter(self._keep_u[u], self.base.user_items(u), self._keep_i)

    def user_tags(self, u: int) -> np.ndarray:
        return self._filter(self._keep_u[u], self.base.user_tags(u), self._keep_t)

    def item_users(self, i: int) -> np.ndarray:
        return self._filter(self._keep_i[i], self.base.item_users(i), self._keep_u)

    def item_tags(self, i: int) -> np.ndarray:
        return self._filter(self._keep_i[i], self.base.item_tags(i), self._keep_t)

    def tag_users(self, t: int) -> np.ndarray:
        return self._filter(self._keep_t[t], self.base.tag_users(t), self._keep_u)

    def tag_items(self, t: int) -> np.ndarray:
        return self._filter(self._keep_t[t], self.base.tag_items(t), self._keep_i)

    edge_tensors = CollaborativeTagGraph.edge_tensors


def dropout_view(
    g: CollaborativeTagGraph, ratio: float, rng: np.random.Generator
) -> DropoutView:
    """Mask a uniformly sampled fraction ``ratio`` of nodes for one step.

    Node ids are drawn over the union of users, items, and tags; the count
    is round(ratio * n_nodes). Deterministic under a fixed generator state.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    keep_u = np.ones(g.n_users, dtype=bool)
    keep_i = np.ones(g.n_items, dtype=bool)
    keep_t = np.ones(g.n_tags, dtype=bool)
    k = int(round(ratio * g.n_nodes))
    if k > 0:
        dropped = rng.choice(g.n_nodes, size=k, replace=False)
        keep_u[dropped[dropped < g.n_users]] = False
        items = dropped[(dropped >= g.n_users) & (dropped < g.n_users + g.n_items)]
        keep_i[items - g.n_users] = False
        tags = dropped[dropped >= g.n_users + g.n_items]
        keep_t[tags - g.n_users - g.n_items] = False
    return DropoutView(g, keep_u, keep_i, keep_t)
