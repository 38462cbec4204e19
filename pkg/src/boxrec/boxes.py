"""Axis-aligned box embeddings and the smoothed-volume machinery.

A box is a (center, offset) pair of d-dimensional vectors; the offset holds
per-dimension half-widths and is element-wise non-negative. Two logical
operations combine sets of boxes: intersection (attention-weighted centers,
element-wise min of offsets) and union (same centers, element-wise max).
Overlap between two boxes is measured through the location parameters of
Gumbel-distributed corners, which keeps the volume differentiable even when
the hard boxes are disjoint.

All functions are pure and operate on ``torch`` tensors of any floating
dtype; batched leading dimensions broadcast in the usual way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

EULER_GAMMA = 0.5772156649015329

# below this, log(softplus(x)) is evaluated as x to avoid exp underflow
_LOG_SOFTPLUS_CUTOFF = -30.0


@dataclass(frozen=True)
class BoxEmbedding:
    """A d-dimensional axis-aligned box: corners are center ± offset."""

    center: Tensor
    offset: Tensor

    def __post_init__(self) -> None:
        if self.center.shape != self.offset.shape:
            raise ValueError(
                f"center shape {tuple(self.center.shape)} != offset shape "
                f"{tuple(self.offset.shape)}"
            )
        if (self.offset < 0).any():
            raise ValueError("box offsets must be element-wise non-negative")

    @property
    def dim(self) -> int:
        return self.center.shape[-1]

    def __getitem__(self, idx) -> "BoxEmbedding":
        return BoxEmbedding(self.center[idx], self.offset[idx])


@dataclass(frozen=True)
class GumbelBoxParams:
    """Location parameters (mu_z, mu_Z) of a box's min/max corner Gumbels.

    For intersections of disjoint boxes mu_Z < mu_z is legitimate, so only
    the shapes are validated.
    """

    mu_z: Tensor
    mu_Z: Tensor

    def __post_init__(self) -> None:
        if self.mu_z.shape != self.mu_Z.shape:
            raise ValueError(
                f"mu_z shape {tuple(self.mu_z.shape)} != mu_Z shape "
                f"{tuple(self.mu_Z.shape)}"
            )

    @property
    def dim(self) -> int:
        return self.mu_z.shape[-1]


class AttentionParams(nn.Module):
    """Affine map from a d-dim center to d-dim attention logits.

    One instance is shared per propagation layer across node types and
    operator kinds. Created zero-initialized (uniform attention); training
    overwrites the weight with xavier draws.
    """

    def __init__(self, dim: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        if dim <= 0:
            raise ValueError(f"attention dimension must be positive, got {dim}")
        self.weight = nn.Parameter(torch.zeros(dim, dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=dtype))

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, centers: Tensor) -> Tensor:
        return torch.nn.functional.linear(centers, self.weight, self.bias)


@dataclass(frozen=True)
class ScoringConfig:
    """Gumbel scale and the Euler-Mascheroni constant used by the volume."""

    beta: float = 0.2
    euler_gamma: float = EULER_GAMMA

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


def attention_weights(centers: Sequence[Tensor], attn: AttentionParams) -> Tensor:
    """Per-dimension softmax weights over a set of box centers.

    Returns a stacked (n, ..., d) tensor; along the first axis the weights
    sum to 1 in every dimension.
    """
    if len(centers) == 0:
        raise ValueError("attention_weights requires at least one center")
    logits = attn(torch.stack(tuple(centers)))
    return torch.softmax(logits, dim=0)


def _aggregate_center(centers: Tensor, attn: AttentionParams) -> Tensor:
    weights = torch.softmax(attn(centers), dim=0)
    return (weights * centers).sum(dim=0)


def intersect_boxes(boxes: Sequence[BoxEmbedding], attn: AttentionParams) -> BoxEmbedding:
    """Intersection: attention-weighted center sum, element-wise min offset."""
    if len(boxes) == 0:
        raise ValueError("intersect_boxes requires at least one box")
    centers = torch.stack([b.center for b in boxes])
    offsets = torch.stack([b.offset for b in boxes])
    return BoxEmbedding(_aggregate_center(centers, attn), offsets.amin(dim=0))


def union_boxes(boxes: Sequence[BoxEmbedding], attn: AttentionParams) -> BoxEmbedding:
    """Union: attention-weighted center sum, element-wise max offset."""
    if len(boxes) == 0:
        raise ValueError("union_boxes requires at least one box")
    centers = torch.stack([b.center for b in boxes])
    offsets = torch.stack([b.offset for b in boxes])
    return BoxEmbedding(_aggregate_center(centers, attn), offsets.amax(dim=0))


def gumbel_corners(box: BoxEmbedding) -> GumbelBoxParams:
    """Corner locations of a box: mu_z = center - offset, mu_Z = center + offset."""
    return GumbelBoxParams(box.center - box.offset, box.center + box.offset)


def gumbel_intersection(
    a: GumbelBoxParams, b: GumbelBoxParams, cfg: ScoringConfig
) -> GumbelBoxParams:
    """Corners of the intersected Gumbel box.

    The min corner is the beta-scaled smooth maximum of the two min corners,
    the max corner the smooth minimum of the two max corners; both are
    evaluated through ``logaddexp`` so large corner magnitudes never
    overflow.
    """
    beta = cfg.beta
    mu_z = beta * torch.logaddexp(a.mu_z / beta, b.mu_z / beta)
    mu_Z = -beta * torch.logaddexp(-a.mu_Z / beta, -b.mu_Z / beta)
    return GumbelBoxParams(mu_z, mu_Z)


def _log_softplus(x: Tensor) -> Tensor:
    # log(log(1 + e^x)) -> x as x -> -inf; switch branches before the inner
    # softplus underflows so the result stays finite for all finite inputs
    safe = torch.nn.functional.softplus(x.clamp_min(_LOG_SOFTPLUS_CUTOFF))
    return torch.where(x < _LOG_SOFTPLUS_CUTOFF, x, torch.log(safe))


def log_volume(corners: GumbelBoxParams, cfg: ScoringConfig) -> Tensor:
    """Log of the smoothed box volume.

    Each dimension contributes log(beta * log(1 + exp(gap/beta - 2*gamma)))
    with gap = mu_Z - mu_z, and the per-dimension logs are summed; the raw
    product would underflow to zero long before d reaches useful sizes. The
    result is finite (large-negative for heavily disjoint corners) and has
    nonzero gradient everywhere.
    """
    gap = corners.mu_Z - corners.mu_z
    arg = gap / cfg.beta - 2.0 * cfg.euler_gamma
    return (math.log(cfg.beta) + _log_softplus(arg)).sum(dim=-1)
