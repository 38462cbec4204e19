"""Parameter tables, the training loop, early stopping, and checkpoints.

Parameters are float64 throughout: the acceptance tolerances on gradients
and on run-to-run reproducibility are tighter than float32 can honour, and
the graphs involved are small enough that speed is not a concern.

Checkpoints use a self-describing container: an ASCII magic line, a little-
endian uint64 header length, a canonical-JSON header (sorted keys, no
whitespace) describing config, vocabulary sizes, the RNG seed, and every
table's name/shape/offset, followed by the raw little-endian float64 table
bytes in row-major order. Saving a loaded checkpoint reproduces the file
byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from .boxes import AttentionParams, ScoringConfig
from .graph import CollaborativeTagGraph, dropout_view
from .objective import TripleBatch, bpr_loss, hard_volume_score, score
from .propagation import propagate

CHECKPOINT_MAGIC = b"BOXREC-CKPT-1\n"
DTYPE = torch.float64


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    dim: int = 64
    n_layers: int = 3
    batch_size: int = 1024
    learning_rate: float = 1e-3
    reg_lambda: float = 1e-5
    dropout_ratio: float = 0.1
    beta: float = 0.2
    gumbel: bool = True  # False -> hard-overlap scoring (ablation)
    eval_every: int = 5
    patience: int = 10
    max_epochs: int = 500
    seed: int = 42

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.n_layers < 0:
            raise ValueError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.reg_lambda < 0:
            raise ValueError(f"reg_lambda must be >= 0, got {self.reg_lambda}")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ValueError(f"dropout_ratio must be in [0, 1), got {self.dropout_ratio}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")

    @property
    def scoring(self) -> ScoringConfig:
        return ScoringConfig(beta=self.beta)


class ModelParams(nn.Module):
    """Center and raw-offset tables for the three node types, plus per-layer
    attention maps. Raw offsets are unconstrained; the effective (non-
    negative) offset is their absolute value, taken at read time."""

    def __init__(
        self, n_users: int, n_items: int, n_tags: int, dim: int, n_layers: int
    ):
        super().__init__()
        if min(n_users, n_items, n_tags) <= 0:
            raise ValueError(
                f"node counts must be positive, got "
                f"({n_users}, {n_items}, {n_tags})"
            )
        if dim <= 0:
            raise ValueError(f"dim must be positive, got {dim}")
        self.n_users, self.n_items, self.n_tags = n_users, n_items, n_tags
        self.dim = dim
        self.user_center = nn.Parameter(torch.zeros(n_users, dim, dtype=DTYPE))
        self.user_offset = nn.Parameter(torch.zeros(n_users, dim, dtype=DTYPE))
        self.item_center = nn.Parameter(torch.zeros(n_items, dim, dtype=DTYPE))
        self.item_offset = nn.Parameter(torch.zeros(n_items, dim, dtype=DTYPE))
        self.tag_center = nn.Parameter(torch.zeros(n_tags, dim, dtype=DTYPE))
        self.tag_offset = nn.Parameter(torch.zeros(n_tags, dim, dtype=DTYPE))
        self.attention = nn.ModuleList(
            AttentionParams(dim, dtype=DTYPE) for _ in range(n_layers)
        )

    @property
    def n_layers(self) -> int:
        return len(self.attention)

    def table_items(self) -> list[tuple[str, Tensor]]:
        """All tables in the fixed checkpoint order."""
        items = [
            ("user_center", self.user_center),
            ("user_offset", self.user_offset),
            ("item_center", self.item_center),
            ("item_offset", self.item_offset),
            ("tag_center", self.tag_center),
            ("tag_offset", self.tag_offset),
        ]
        for layer, attn in enumerate(self.attention):
            items.append((f"attention_{layer}_weight", attn.weight))
            items.append((f"attention_{layer}_bias", attn.bias))
        return items

    def batch_l2(self, users: Tensor, pos_items: Tensor, neg_items: Tensor) -> Tensor:
        """Squared norm of the rows a batch touches plus the attention maps."""
        total = (
            self.user_center[users].square().sum()
            + self.user_offset[users].square().sum()
            + self.item_center[pos_items].square().sum()
            + self.item_offset[pos_items].square().sum()
            + self.item_center[neg_items].square().sum()
            + self.item_offset[neg_items].square().sum()
        )
        for attn in self.attention:
            total = total + attn.weight.square().sum() + attn.bias.square().sum()
        return total


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(
    counts: tuple[int, int, int], cfg: TrainConfig, rng: torch.Generator
) -> ModelParams:
    """Xavier-uniform tables, deterministic under the generator state.

    Embedding rows use fan_in = fan_out = dim, so entries are uniform on
    +/- sqrt(3/dim); attention weights use the same bound for their square
    map, with zero bias.
    """
    n_users, n_items, n_tags = counts
    params = ModelParams(n_users, n_items, n_tags, cfg.dim, cfg.n_layers)
    bound = xavier_bound(cfg.dim, cfg.dim)
    with torch.no_grad():
        for _, table in params.table_items():
            if table.dim() == 2:
                table.uniform_(-bound, bound, generator=rng)
    return params


def sample_negative(
    user: int, train_positives, n_items: int, rng: np.random.Generator
) -> int:
    """Uniform draw over the items the user has not interacted with."""
    positives = train_positives[user]
    if len(positives) >= n_items:
        raise ValueError(f"user {user} has interacted with every item; cannot sample")
    while True:
        candidate = int(rng.integers(n_items))
        if candidate not in positives:
            return candidate


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def make_optimizer(params: ModelParams, cfg: TrainConfig) -> torch.optim.Adam:
    # the paper-standard adaptive-moment settings
    return torch.optim.Adam(
        params.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )


def train_epoch(
    params: ModelParams,
    ctg: CollaborativeTagGraph,
    train_pairs: np.ndarray,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    train_positives=None,
) -> tuple[ModelParams, float]:
    """One pass over the shuffled training pairs; returns mean batch loss.

    Each batch draws a fresh node-dropout view, propagates through it,
    scores one sampled negative against every positive, and applies a BPR
    update. ``train_positives`` defaults to the sets implied by
    ``train_pairs``.
    """
    if len(train_pairs) == 0:
        raise ValueError("training set is empty")
    if train_positives is None:
        train_positives = positive_sets(train_pairs, params.n_users)
    losses = []
    for batch_idx in _epoch_batches(len(train_pairs), cfg.batch_size, rng):
        users = train_pairs[batch_idx, 0]
        pos = train_pairs[batch_idx, 1]
        neg = np.array(
            [sample_negative(u, train_positives, params.n_items, rng) for u in users],
            dtype=np.int64,
        )
        view = dropout_view(ctg, cfg.dropout_ratio, rng) if cfg.dropout_ratio > 0 else ctg
        state = propagate(params, view, cfg.n_layers)
        batch = TripleBatch(
            torch.from_numpy(users), torch.from_numpy(pos), torch.from_numpy(neg)
        )
        u_box = state.users[batch.users]
        if cfg.gumbel:
            s_pos = score(u_box, state.items[batch.pos_items], cfg.scoring)
            s_neg = score(u_box, state.items[batch.neg_items], cfg.scoring)
        else:
            s_pos = hard_volume_score(u_box, state.items[batch.pos_items])
            s_neg = hard_volume_score(u_box, state.items[batch.neg_items])
        loss = bpr_loss(batch, s_pos, s_neg, params, cfg.reg_lambda)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    return params, float(np.mean(losses))


def positive_sets(train_pairs: np.ndarray, n_users: int) -> list[set[int]]:
    out: list[set[int]] = [set() for _ in range(n_users)]
    for u, i in train_pairs:
        out[int(u)].add(int(i))
    return out


@dataclass
class EarlyStopping:
    """Stops after ``patience`` consecutive non-improving evaluations.

    Equal-to-best counts as non-improvement.
    """

    patience: int
    best: float = float("-inf")
    stalls: int = 0

    def step(self, metric: float) -> tuple[bool, bool]:
        """Returns (should_stop, is_new_best)."""
        if metric > self.best:
            self.best = metric
            self.stalls = 0
            return False, True
        self.stalls += 1
        return self.stalls >= self.patience, False


@dataclass
class FitResult:
    epoch_losses: list[tuple[int, float]] = field(default_factory=list)
    evaluations: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None
    stopped_early: bool = False


def fit(
    params: ModelParams,
    ctg: CollaborativeTagGraph,
    dataset,
    cfg: TrainConfig,
    *,
    rng: np.random.Generator | None = None,
    on_new_best: Callable[[ModelParams, int, float], None] | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> FitResult:
    """Epoch loop with periodic validation and early stopping.

    Validation (Recall@20 on the held-out validation split) runs every
    ``cfg.eval_every`` epochs; each new best triggers ``on_new_best``. At
    the end, the best-scoring parameters are restored into ``params``.
    """
    from .evaluation import evaluate  # local import to avoid a cycle

    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    train_pairs = dataset.train_user_item_pairs()
    train_positives = dataset.train_positive_sets()
    optimizer = make_optimizer(params, cfg)
    stopper = EarlyStopping(cfg.patience)
    result = FitResult()
    best_state: dict | None = None

    for epoch in range(1, cfg.max_epochs + 1):
        _, mean_loss = train_epoch(
            params, ctg, train_pairs, cfg, optimizer, rng, train_positives
        )
        result.epoch_losses.append((epoch, mean_loss))
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        if epoch % cfg.eval_every != 0:
            continue
        ranking = evaluate(
            params,
            ctg,
            dataset,
            split="validation",
            cfg=cfg.scoring,
            gumbel=cfg.gumbel,
            n_layers=cfg.n_layers,
        )
        metric = ranking.recall.get(20, 0.0)
        stop, is_best = stopper.step(metric)
        result.evaluations.append(
            {
                "epoch": epoch,
                "recall": dict(ranking.recall),
                "ndcg": dict(ranking.ndcg),
                "is_best": is_best,
            }
        )
        if is_best:
            result.best_epoch = epoch
            result.best_metric = metric
            best_state = {
                k: v.detach().clone() for k, v in params.state_dict().items()
            }
            if on_new_best is not None:
                on_new_best(params, epoch, metric)
        if stop:
            result.stopped_early = True
            break

    if best_state is not None:
        params.load_state_dict(best_state)
    return result


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(
    path,
    params: ModelParams,
    *,
    config: dict | None = None,
    seed: int | None = None,
    vocab_hash: str | None = None,
) -> None:
    tables = []
    blobs = []
    offset = 0
    for name, tensor in params.table_items():
        raw = np.ascontiguousarray(tensor.detach().numpy(), dtype="<f8")
        blob = raw.tobytes(order="C")
        tables.append(
            {"name": name, "shape": list(raw.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "counts": {
            "users": params.n_users,
            "items": params.n_items,
            "tags": params.n_tags,
        },
        "dim": params.dim,
        "layers": params.n_layers,
        "dtype": "<f8",
        "order": "C",
        "seed": seed,
        "vocab_hash": vocab_hash,
        "config": config,
        "tables": tables,
    }
    payload = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a recognized checkpoint file")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length).decode("utf-8"))
        body = fh.read()
    counts = header["counts"]
    params = ModelParams(
        counts["users"], counts["items"], counts["tags"], header["dim"], header["layers"]
    )
    by_name = dict(params.table_items())
    for entry in header["tables"]:
        raw = np.frombuffer(
            body, dtype="<f8", count=entry["nbytes"] // 8, offset=entry["offset"]
        ).reshape(entry["shape"])
        with torch.no_grad():
            by_name[entry["name"]].copy_(torch.from_numpy(raw.copy()))
    return params, header


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
