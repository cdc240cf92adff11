"""Interaction ingestion, k-core filtering, splitting, and popularity counts.

Interaction files are UTF-8 TSV with columns <user_id, item_id, ...ignored>
and an optional header.  Identifiers are remapped to dense indices in order
of first appearance; edge lists are kept in canonical (user, item) sorted
order so that downstream construction is independent of file row order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ConfigError, ContractError, EmptyDataError, FormatError,
                     ShapeError, SplitError)
from .fileformats import read_features

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VALID: "valid", TEST: "test"}
SPLIT_CODES = {v: k for k, v in SPLIT_NAMES.items()}

_HEADER_TOKENS = {"user", "item", "user_id", "item_id", "userid", "itemid", "uid", "iid"}


@dataclass
class InteractionTable:
    """Deduplicated user-item edges over dense index spaces."""

    user_count: int
    item_count: int
    edges: np.ndarray  # (n_edges, 2) int64, sorted by (user, item)
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        order = np.lexsort((self.edges[:, 1], self.edges[:, 0]))
        self.edges = self.edges[order]
        if len(self.edges):
            if self.edges[:, 0].min() < 0 or self.edges[:, 0].max() >= self.user_count:
                raise ContractError("user index out of range")
            if self.edges[:, 1].min() < 0 or self.edges[:, 1].max() >= self.item_count:
                raise ContractError("item index out of range")
            dup = np.all(self.edges[1:] == self.edges[:-1], axis=1)
            if dup.any():
                raise ContractError("duplicate (user, item) pairs")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.user_count)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.item_count)


@dataclass
class FeatureMatrix:
    """Per-item content features for one modality."""

    modality: str  # "text" or "visual"
    values: np.ndarray  # (item_count, dim) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"feature matrix must be 2-D, got {self.values.shape}")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class Dataset:
    """Interactions with a split assignment and popularity counts."""

    interactions: InteractionTable
    split: np.ndarray  # int8 per edge, aligned with interactions.edges
    item_pop: np.ndarray  # int64 per-item training interaction counts
    features: dict[str, FeatureMatrix] = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return self.interactions.user_count

    @property
    def n_items(self) -> int:
        return self.interactions.item_count

    def edges_of(self, part: int) -> np.ndarray:
        return self.interactions.edges[self.split == part]

    def items_by_user(self, part: int) -> list[np.ndarray]:
        """Item indices per user within one split, ascending."""
        out: list[list[int]] = [[] for _ in range(self.n_users)]
        for u, i in self.edges_of(part):
            out[u].append(i)
        return [np.asarray(items, dtype=np.int64) for items in out]

    def attach_features(self, modality: str, values: np.ndarray) -> None:
        if values.shape[0] != self.n_items:
            raise ShapeError(
                f"{modality} features have {values.shape[0]} rows, dataset has "
                f"{self.n_items} items")
        self.features[modality] = FeatureMatrix(modality, values)


def load_interactions(path, has_header: bool | None = None) -> InteractionTable:
    """Parse a TSV interaction file into a dense-index edge table."""
    path = Path(path)
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    edges: list[tuple[int, int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            cols = line.split("\t")
            if lineno == 1:
                skip = has_header
                if skip is None:
                    skip = any(c.strip().lower() in _HEADER_TOKENS for c in cols[:2])
                if skip:
                    continue
            if len(cols) < 2 or not cols[0] or not cols[1]:
                raise FormatError(f"{path}:{lineno}: expected at least two columns")
            u = users.setdefault(cols[0], len(users))
            i = items.setdefault(cols[1], len(items))
            if (u, i) not in seen:
                seen.add((u, i))
                edges.append((u, i))
    if not edges:
        raise EmptyDataError(f"{path}: no interactions found")
    return InteractionTable(
        user_count=len(users), item_count=len(items),
        edges=np.asarray(edges, dtype=np.int64),
        user_ids=list(users), item_ids=list(items))


def k_core_filter(table: InteractionTable, k: int) -> InteractionTable:
    """Peel users and items until all surviving nodes have >= k edges."""
    if k < 1:
        raise ConfigError(f"k-core requires k >= 1, got {k}")
    edges = table.edges
    keep_users = np.ones(table.user_count, dtype=bool)
    keep_items = np.ones(table.item_count, dtype=bool)
    while True:
        mask = keep_users[edges[:, 0]] & keep_items[edges[:, 1]]
        active = edges[mask]
        udeg = np.bincount(active[:, 0], minlength=table.user_count)
        ideg = np.bincount(active[:, 1], minlength=table.item_count)
        new_users = keep_users & (udeg >= k)
        new_items = keep_items & (ideg >= k)
        if np.array_equal(new_users, keep_users) and np.array_equal(new_items, keep_items):
            break
        keep_users, keep_items = new_users, new_items
    mask = keep_users[edges[:, 0]] & keep_items[edges[:, 1]]
    active = edges[mask]
    if len(active) == 0:
        raise EmptyDataError(f"{k}-core filtering removed every interaction")
    user_old = np.flatnonzero(keep_users)
    item_old = np.flatnonzero(keep_items)
    user_new = np.full(table.user_count, -1, dtype=np.int64)
    item_new = np.full(table.item_count, -1, dtype=np.int64)
    user_new[user_old] = np.arange(len(user_old))
    item_new[item_old] = np.arange(len(item_old))
    remapped = np.column_stack([user_new[active[:, 0]], item_new[active[:, 1]]])
    return InteractionTable(
        user_count=len(user_old), item_count=len(item_old), edges=remapped,
        user_ids=[table.user_ids[j] for j in user_old] if table.user_ids else [],
        item_ids=[table.item_ids[j] for j in item_old] if table.item_ids else [])


def split_dataset(table: InteractionTable, ratios=(0.8, 0.1, 0.1),
                  seed: int = 0) -> Dataset:
    """Assign each edge to train/valid/test with a per-user seeded shuffle.

    Valid and test receive floor(n * ratio) edges each, promoted to a
    minimum of one so that every user can be evaluated; the remainder goes
    to train, which must keep at least one edge.
    """
    if len(ratios) != 3 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three values summing to 1, got {ratios}")
    degrees = table.user_degrees()
    starving = np.flatnonzero(degrees < 3)
    if len(starving):
        uid = table.user_ids[starving[0]] if table.user_ids else str(starving[0])
        raise SplitError(
            f"user {uid!r} has only {degrees[starving[0]]} edges; "
            f"splitting requires at least 3 per user")

    rng = np.random.default_rng(seed)
    split = np.empty(table.n_edges, dtype=np.int8)
    edge_rows_by_user = np.split(np.arange(table.n_edges),
                                 np.cumsum(degrees)[:-1])
    for rows in edge_rows_by_user:
        n = len(rows)
        if n == 0:
            continue
        n_valid = max(1, int(n * ratios[1]))
        n_test = max(1, int(n * ratios[2]))
        perm = rng.permutation(n)
        split[rows[perm[:n_valid]]] = VALID
        split[rows[perm[n_valid:n_valid + n_test]]] = TEST
        split[rows[perm[n_valid + n_test:]]] = TRAIN
    train_edges = table.edges[split == TRAIN]
    item_pop = np.bincount(train_edges[:, 1], minlength=table.item_count)
    return Dataset(interactions=table, split=split, item_pop=item_pop.astype(np.int64))


def compute_popularity(dataset: Dataset) -> np.ndarray:
    """ln(1 + n_j) over training interaction counts."""
    return np.log1p(dataset.item_pop.astype(np.float64))


def load_features(path, expected_rows: int) -> np.ndarray:
    return read_features(path, expected_rows=expected_rows)


# ---------------------------------------------------------------------------
# on-disk dataset directory (output of the `prepare` command)
# ---------------------------------------------------------------------------

SPLITS_FILE = "splits.tsv"
USER_MAP_FILE = "user_map.tsv"
ITEM_MAP_FILE = "item_map.tsv"
ITEM_POP_FILE = "item_pop.tsv"


def save_dataset_dir(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = dataset.interactions
    with open(out / SPLITS_FILE, "w", encoding="utf-8") as fh:
        fh.write("user_index\titem_index\tsplit\n")
        for (u, i), s in zip(table.edges, dataset.split):
            fh.write(f"{u}\t{i}\t{SPLIT_NAMES[int(s)]}\n")
    for fname, ids in ((USER_MAP_FILE, table.user_ids), (ITEM_MAP_FILE, table.item_ids)):
        with open(out / fname, "w", encoding="utf-8") as fh:
            fh.write("original_id\tdense_index\n")
            for idx, original in enumerate(ids):
                fh.write(f"{original}\t{idx}\n")
    with open(out / ITEM_POP_FILE, "w", encoding="utf-8") as fh:
        fh.write("item_index\ttrain_count\tpop\n")
        pop = compute_popularity(dataset)
        for j, (n, p) in enumerate(zip(dataset.item_pop, pop)):
            fh.write(f"{j}\t{n}\t{p!r}\n")


def load_dataset_dir(data_dir) -> Dataset:
    data = Path(data_dir)
    user_ids = _read_map(data / USER_MAP_FILE)
    item_ids = _read_map(data / ITEM_MAP_FILE)
    edges: list[tuple[int, int]] = []
    codes: list[int] = []
    with open(data / SPLITS_FILE, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("user_index"):
            raise FormatError(f"{data / SPLITS_FILE}: unexpected header", artifact=True)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3 or cols[2] not in SPLIT_CODES:
                raise FormatError(f"{data / SPLITS_FILE}:{lineno}: bad row", artifact=True)
            edges.append((int(cols[0]), int(cols[1])))
            codes.append(SPLIT_CODES[cols[2]])
    if not edges:
        raise EmptyDataError(f"{data / SPLITS_FILE}: no edges")
    table = InteractionTable(
        user_count=len(user_ids), item_count=len(item_ids),
        edges=np.asarray(edges, dtype=np.int64),
        user_ids=user_ids, item_ids=item_ids)
    # rows were written in canonical order, so the table reorders nothing
    split = np.asarray(codes, dtype=np.int8)
    train_edges = table.edges[split == TRAIN]
    item_pop = np.bincount(train_edges[:, 1], minlength=table.item_count).astype(np.int64)
    return Dataset(interactions=table, split=split, item_pop=item_pop)


def _read_map(path) -> list[str]:
    ids: list[str] = []
    with open(path, encoding="utf-8") as fh:
        fh.readline()  # header
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            original, idx = line.split("\t")
            if int(idx) != len(ids):
                raise FormatError(f"{path}: non-contiguous dense indices", artifact=True)
            ids.append(original)
    return ids
