"""HetRec-style ingestion, tag filtering, vocabularies, and the data split.

Input files are tab-separated with one header line; the first three columns
of every row are (user, item, tag) external ids and any trailing columns
(timestamps etc.) are ignored. Raw ids become dense indices ordered by first
appearance in the filtered record stream, so the vocabulary does not depend
on the split seed. Splitting shuffles assignments under a seeded generator
and slices contiguously, with floor-rounded validation/test sizes and the
remainder assigned to training.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .graph import CollaborativeTagGraph, build_ctg

MANIFEST_FORMAT = "boxrec-dataset-v1"


class RawRecord(NamedTuple):
    user_raw: str
    item_raw: str
    tag_raw: str


class HetrecFormatError(ValueError):
    """A malformed header or row, reported with its 1-based line number."""


def load_hetrec(path) -> list[RawRecord]:
    """Parse a HetRec tab-separated assignment file."""
    path = Path(path)
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise HetrecFormatError(f"{path}: empty file, expected a header line")
    header = lines[0].split("\t")
    if len(header) < 3 or any(_is_int(c) for c in header[:3]):
        raise HetrecFormatError(
            f"{path}:1: expected a tab-separated header with at least three "
            f"column names, got {lines[0]!r}"
        )
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 3:
            raise HetrecFormatError(
                f"{path}:{lineno}: expected at least 3 tab-separated columns, "
                f"got {len(cols)}"
            )
        user, item, tag = cols[0].strip(), cols[1].strip(), cols[2].strip()
        for label, value in (("user", user), ("item", item), ("tag", tag)):
            if not _is_int(value):
                raise HetrecFormatError(
                    f"{path}:{lineno}: non-numeric {label} id {value!r}"
                )
        records.append(RawRecord(user, item, tag))
    return records


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def filter_tags(records: list[RawRecord], min_count: int = 5) -> list[RawRecord]:
    """Drop records whose tag occurs fewer than ``min_count`` times.

    A single pass over the input; surviving users/items are not re-filtered.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts: dict[str, int] = {}
    for rec in records:
        counts[rec.tag_raw] = counts.get(rec.tag_raw, 0) + 1
    return [rec for rec in records if counts[rec.tag_raw] >= min_count]


@dataclass
class Dataset:
    """Vocabularies plus the train/validation/test assignment arrays.

    Assignment arrays are (n, 3) int64 with columns (user, tag, item). The
    splits are disjoint and their union is the filtered assignment set.
    """

    users: list[str]
    items: list[str]
    tags: list[str]
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.user_index = {raw: i for i, raw in enumerate(self.users)}
        self.item_index = {raw: i for i, raw in enumerate(self.items)}
        self.tag_index = {raw: i for i, raw in enumerate(self.tags)}
        self._positive_sets: list[set[int]] | None = None

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_tags(self) -> int:
        return len(self.tags)

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.n_users, self.n_items, self.n_tags

    def split(self, name: str) -> np.ndarray:
        try:
            return {"train": self.train, "validation": self.validation, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def train_user_item_pairs(self) -> np.ndarray:
        """Unique (user, item) training interactions, the entries of Y."""
        if len(self.train) == 0:
            return np.empty((0, 2), dtype=np.int64)
        return np.unique(self.train[:, [0, 2]], axis=0)

    def train_positive_sets(self) -> list[set[int]]:
        if self._positive_sets is None:
            sets: list[set[int]] = [set() for _ in range(self.n_users)]
            for u, _, i in self.train:
                sets[int(u)].add(int(i))
            self._positive_sets = sets
        return self._positive_sets

    def vocab_hash(self) -> str:
        payload = json.dumps(
            {"users": self.users, "items": self.items, "tags": self.tags},
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def training_graph(self) -> CollaborativeTagGraph:
        """The collaborative tag graph over the training assignments only."""
        return build_ctg(self.train, self.counts)


def split_dataset(
    records: list[RawRecord],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 42,
    meta: dict | None = None,
) -> Dataset:
    """Index the records and split them into train/validation/test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    if len(records) < 3:
        raise ValueError(f"need at least 3 records to split, got {len(records)}")

    users: list[str] = []
    items: list[str] = []
    tags: list[str] = []
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    tag_index: dict[str, int] = {}

    def intern(raw: str, index: dict[str, int], names: list[str]) -> int:
        if raw not in index:
            index[raw] = len(names)
            names.append(raw)
        return index[raw]

    triples = np.empty((len(records), 3), dtype=np.int64)
    for k, rec in enumerate(records):
        triples[k, 0] = intern(rec.user_raw, user_index, users)
        triples[k, 1] = intern(rec.tag_raw, tag_index, tags)
        triples[k, 2] = intern(rec.item_raw, item_index, items)

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(records))
    n = len(records)
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_val - n_test
    shuffled = triples[perm]
    info = dict(meta or {})
    info.update({"seed": seed, "ratios": list(ratios)})
    return Dataset(
        users=users,
        items=items,
        tags=tags,
        train=shuffled[:n_train].copy(),
        validation=shuffled[n_train : n_train + n_val].copy(),
        test=shuffled[n_train + n_val :].copy(),
        meta=info,
    )


def prepare_dataset(
    path,
    min_tag_count: int = 5,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 42,
) -> Dataset:
    """Load, filter infrequent tags, and split in one call."""
    records = filter_tags(load_hetrec(path), min_tag_count)
    meta = {"source": str(path), "min_tag_count": min_tag_count}
    return split_dataset(records, ratios=ratios, seed=seed, meta=meta)


def save_manifest(dataset: Dataset, path) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "meta": dataset.meta,
        "users": dataset.users,
        "items": dataset.items,
        "tags": dataset.tags,
        "splits": {
            "train": dataset.train.tolist(),
            "validation": dataset.validation.tolist(),
            "test": dataset.test.tolist(),
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_manifest(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a {MANIFEST_FORMAT} manifest")

    def arr(rows) -> np.ndarray:
        return np.asarray(rows, dtype=np.int64).reshape(-1, 3)

    return Dataset(
        users=list(doc["users"]),
        items=list(doc["items"]),
        tags=list(doc["tags"]),
        train=arr(doc["splits"]["train"]),
        validation=arr(doc["splits"]["validation"]),
        test=arr(doc["splits"]["test"]),
        meta=dict(doc.get("meta", {})),
    )
