"""Type-aware message passing over the collaborative tag graph.

Each layer rebuilds every node's box from its neighbors' previous-layer
boxes (synchronous semantics: layer l+1 reads only layer l). Centers are
always a per-dimension softmax-attention sum over the union of a node's
neighbors; offsets follow the node type:

  user  -> Max( Min over item-neighbor offsets, Max over tag-neighbor offsets )
  tag   -> Min over all neighbor offsets
  item  -> Max over all neighbor offsets

A node with no surviving neighbors keeps its own layer-l box. The per-node
``aggregate_*`` functions are the reference semantics; :func:`propagate`
computes all nodes of a layer at once with segment reductions and must agree
with them exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .boxes import AttentionParams, BoxEmbedding, attention_weights


@dataclass(frozen=True)
class LayerState:
    """Per-node boxes for every user, item, and tag at one layer."""

    users: BoxEmbedding
    items: BoxEmbedding
    tags: BoxEmbedding
    layer: int


def _attention_sum(centers: Tensor, attn: AttentionParams) -> Tensor:
    weights = attention_weights(centers, attn)
    return (weights * centers).sum(dim=0)


def aggregate_user(
    u: int, state: LayerState, g, attn: AttentionParams
) -> BoxEmbedding:
    """One-step user box from its item and tag neighbors."""
    items = g.user_items(u)
    tags = g.user_tags(u)
    if len(items) == 0 and len(tags) == 0:
        return state.users[u]
    neighbor_centers = torch.cat(
        [state.items.center[items], state.tags.center[tags]]
    )
    center = _attention_sum(neighbor_centers, attn)
    branches = []
    if len(items) > 0:
        branches.append(state.items.offset[items].amin(dim=0))
    if len(tags) > 0:
        branches.append(state.tags.offset[tags].amax(dim=0))
    offset = torch.stack(branches).amax(dim=0)
    return BoxEmbedding(center, offset)


def aggregate_tag(t: int, state: LayerState, g, attn: AttentionParams) -> BoxEmbedding:
    """One-step tag box: shared traits, so offsets shrink to the min."""
    users = g.tag_users(t)
    items = g.tag_items(t)
    if len(users) == 0 and len(items) == 0:
        return state.tags[t]
    neighbor_centers = torch.cat(
        [state.users.center[users], state.items.center[items]]
    )
    neighbor_offsets = torch.cat(
        [state.users.offset[users], state.items.offset[items]]
    )
    return BoxEmbedding(
        _attention_sum(neighbor_centers, attn), neighbor_offsets.amin(dim=0)
    )


def aggregate_item(i: int, state: LayerState, g, attn: AttentionParams) -> BoxEmbedding:
    """One-step item box: popularity grows the box, so offsets take the max."""
    users = g.item_users(i)
    tags = g.item_tags(i)
    if len(users) == 0 and len(tags) == 0:
        return state.items[i]
    neighbor_centers = torch.cat(
        [state.users.center[users], state.tags.center[tags]]
    )
    neighbor_offsets = torch.cat(
        [state.users.offset[users], state.tags.offset[tags]]
    )
    return BoxEmbedding(
        _attention_sum(neighbor_centers, attn), neighbor_offsets.amax(dim=0)
    )


# ---------------------------------------------------------------------------
# vectorized layer computation
# ---------------------------------------------------------------------------


def _segment_sum(src: Tensor, index: Tensor, n: int) -> Tensor:
    out = src.new_zeros((n, src.shape[-1]))
    return out.index_add(0, index, src)


def _segment_extreme(src: Tensor, index: Tensor, n: int, reduce: str) -> Tensor:
    """Per-segment amin/amax; empty segments hold +/-inf placeholders."""
    fill = float("inf") if reduce == "amin" else float("-inf")
    out = src.new_full((n, src.shape[-1]), fill)
    idx = index.unsqueeze(-1).expand_as(src)
    return out.scatter_reduce(0, idx, src, reduce=reduce, include_self=True)


def _segment_attention_sum(
    centers: Tensor, index: Tensor, n: int, attn: AttentionParams
) -> Tensor:
    """Softmax-attention sum of ``centers`` grouped by destination node."""
    logits = attn(centers)
    # max-shift per segment for stability; a detached shift leaves both the
    # softmax value and its gradient unchanged
    shift = _segment_extreme(logits.detach(), index, n, "amax")
    ex = torch.exp(logits - shift[index])
    denom = _segment_sum(ex, index, n)
    weights = ex / denom[index]
    return _segment_sum(weights * centers, index, n)


def _counts(index: Tensor, n: int) -> Tensor:
    return torch.bincount(index, minlength=n)


def _where_rows(mask: Tensor, a: Tensor, b: Tensor) -> Tensor:
    return torch.where(mask.unsqueeze(-1), a, b)


def _layer_step(state: LayerState, g, attn: AttentionParams) -> LayerState:
    uc, uo = state.users.center, state.users.offset
    ic, io = state.items.center, state.items.offset
    tc, to = state.tags.center, state.tags.offset
    n_users, n_items, n_tags = uc.shape[0], ic.shape[0], tc.shape[0]

    ui_u, ui_i = g.edge_tensors("ui")
    ut_u, ut_t = g.edge_tensors("ut")
    it_i, it_t = g.edge_tensors("it")

    # users: item neighbors via ui, tag neighbors via ut
    dst = torch.cat([ui_u, ut_u])
    src_centers = torch.cat([ic[ui_i], tc[ut_t]])
    u_center = _segment_attention_sum(src_centers, dst, n_users, attn)
    item_min = _segment_extreme(io[ui_i], ui_u, n_users, "amin")
    tag_max = _segment_extreme(to[ut_t], ut_u, n_users, "amax")
    has_item = _counts(ui_u, n_users) > 0
    has_tag = _counts(ut_u, n_users) > 0
    # Max over the two class branches, each omitted when its class is empty
    a = _where_rows(has_item, item_min, tag_max)
    b = _where_rows(has_tag, tag_max, item_min)
    u_offset = torch.maximum(a, b)
    has_any = has_item | has_tag
    new_users = BoxEmbedding(
        _where_rows(has_any, u_center, uc), _where_rows(has_any, u_offset, uo)
    )

    # tags: user neighbors via ut, item neighbors via it; offsets shrink
    dst = torch.cat([ut_t, it_t])
    src_centers = torch.cat([uc[ut_u], ic[it_i]])
    src_offsets = torch.cat([uo[ut_u], io[it_i]])
    t_center = _segment_attention_sum(src_centers, dst, n_tags, attn)
    t_offset = _segment_extreme(src_offsets, dst, n_tags, "amin")
    has_any = _counts(dst, n_tags) > 0
    new_tags = BoxEmbedding(
        _where_rows(has_any, t_center, tc), _where_rows(has_any, t_offset, to)
    )

    # items: user neighbors via ui, tag neighbors via it; offsets grow
    dst = torch.cat([ui_i, it_i])
    src_centers = torch.cat([uc[ui_u], tc[it_t]])
    src_offsets = torch.cat([uo[ui_u], to[it_t]])
    i_center = _segment_attention_sum(src_centers, dst, n_items, attn)
    i_offset = _segment_extreme(src_offsets, dst, n_items, "amax")
    has_any = _counts(dst, n_items) > 0
    new_items = BoxEmbedding(
        _where_rows(has_any, i_center, ic), _where_rows(has_any, i_offset, io)
    )

    return LayerState(new_users, new_items, new_tags, state.layer + 1)


def initial_state(params) -> LayerState:
    """Layer-0 boxes: raw center tables, offsets through the |.| map."""
    return LayerState(
        users=BoxEmbedding(params.user_center, params.user_offset.abs()),
        items=BoxEmbedding(params.item_center, params.item_offset.abs()),
        tags=BoxEmbedding(params.tag_center, params.tag_offset.abs()),
        layer=0,
    )


def propagate(params, g, n_layers: int | None = None) -> LayerState:
    """Stack ``n_layers`` aggregation layers and return the final state.

    ``n_layers=0`` returns the raw embedding tables (the no-GNN mode).
    Defaults to the number of attention layers the parameters carry.
    """
    if n_layers is None:
        n_layers = len(params.attention)
    if n_layers < 0:
        raise ValueError(f"layer count must be non-negative, got {n_layers}")
    if n_layers > len(params.attention):
        raise ValueError(
            f"requested {n_layers} layers but parameters hold "
            f"{len(params.attention)} attention maps"
        )
    state = initial_state(params)
    for layer in range(n_layers):
        state = _layer_step(state, g, params.attention[layer])
    return state
