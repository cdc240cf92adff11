"""Full-ranking Top-K evaluation and debiasing diagnostics.

Users are scored against every item by inner product, their training items
are removed from the candidate pool, and ties rank the lower item index
first.  Users without relevant items in the requested split are skipped,
not zero-counted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, TEST, TRAIN
from .errors import ConfigError, ContractError, EmptyDataError


def rank_items(user_vec: np.ndarray, item_matrix: np.ndarray,
               exclude=()) -> np.ndarray:
    """Item indices ordered by descending score; excluded items dropped."""
    scores = item_matrix @ np.asarray(user_vec, dtype=np.float64)
    exclude = np.asarray(list(exclude), dtype=np.int64)
    if len(exclude):
        scores = scores.copy()
        scores[exclude] = -np.inf
    order = np.argsort(-scores, kind="stable")
    if len(exclude):
        order = order[:len(scores) - len(exclude)]
    return order


def recall_at_k(ranked: np.ndarray, relevant, k: int) -> float:
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ContractError("recall needs a nonempty relevant set")
    hits = sum(1 for i in ranked[:k] if int(i) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: np.ndarray, relevant, k: int) -> float:
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ContractError("ndcg needs a nonempty relevant set")
    dcg = 0.0
    for rank, item in enumerate(ranked[:k], start=1):
        if int(item) in relevant:
            dcg += 1.0 / math.log2(rank + 1)
    ideal_hits = min(k, len(relevant))
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, ideal_hits + 1))
    return dcg / idcg


@dataclass
class MetricsReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    per_group: dict[str, dict] = field(default_factory=dict)
    diagnostics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "n_users": self.n_users,
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
        }
        if self.per_group:
            out["per_group"] = self.per_group
        if self.diagnostics:
            out["diagnostics"] = self.diagnostics
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, **kwargs)


def evaluate(user_emb: np.ndarray, item_emb: np.ndarray, dataset: Dataset,
             ks=(10, 20), split: int = TEST,
             user_subset: np.ndarray | None = None) -> MetricsReport:
    """Mean Recall@K / NDCG@K over users with at least one relevant item.

    Training items are removed from the candidate pool, except when the
    training split itself is being scored (the memorization probe).
    """
    relevant_by_user = dataset.items_by_user(split)
    exclude_train = split != TRAIN
    train_by_user = dataset.items_by_user(TRAIN) if exclude_train else None
    if user_subset is None:
        user_subset = np.arange(dataset.n_users)
    ks = sorted(int(k) for k in ks)
    recall_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    counted = 0
    for u in user_subset:
        relevant = relevant_by_user[u]
        if len(relevant) == 0:
            continue
        exclude = train_by_user[u] if exclude_train else ()
        ranked = rank_items(user_emb[u], item_emb, exclude=exclude)
        counted += 1
        for k in ks:
            recall_sums[k] += recall_at_k(ranked, relevant, k)
            ndcg_sums[k] += ndcg_at_k(ranked, relevant, k)
    if counted == 0:
        raise EmptyDataError("no users with relevant items in the requested split")
    return MetricsReport(
        recall={k: recall_sums[k] / counted for k in ks},
        ndcg={k: ndcg_sums[k] / counted for k in ks},
        n_users=counted)


def sparsity_groups(dataset: Dataset, boundaries) -> np.ndarray:
    """Bucket index per user from training-interaction counts.

    Bucket b holds users whose count falls in [boundaries[b-1], boundaries[b]);
    the last bucket is open-ended.
    """
    boundaries = np.asarray(sorted(boundaries), dtype=np.int64)
    if len(boundaries) == 0:
        raise ConfigError("sparsity grouping needs at least one boundary")
    train = dataset.edges_of(TRAIN)
    counts = np.bincount(train[:, 0], minlength=dataset.n_users)
    return np.searchsorted(boundaries, counts, side="right")


def evaluate_per_group(user_emb: np.ndarray, item_emb: np.ndarray,
                       dataset: Dataset, boundaries, ks=(20,),
                       split: int = TEST) -> dict[str, dict]:
    """Per-sparsity-bucket metrics; empty buckets are absent from the map."""
    buckets = sparsity_groups(dataset, boundaries)
    bounds = sorted(boundaries)
    labels = {}
    lo = 0
    for b, edge in enumerate(bounds):
        labels[b] = f"[{lo},{edge})"
        lo = edge
    labels[len(bounds)] = f"[{lo},inf)"
    out: dict[str, dict] = {}
    for b in range(len(bounds) + 1):
        members = np.flatnonzero(buckets == b)
        if len(members) == 0:
            continue
        try:
            report = evaluate(user_emb, item_emb, dataset, ks=ks, split=split,
                              user_subset=members)
        except EmptyDataError:
            continue
        out[labels[b]] = {
            "n_users": report.n_users,
            "recall": {str(k): v for k, v in report.recall.items()},
            "ndcg": {str(k): v for k, v in report.ndcg.items()},
        }
    return out


@dataclass
class BiasStats:
    avg_pop: float
    tail_ratio: float

    def to_dict(self) -> dict[str, float]:
        return {"avg_pop": self.avg_pop, "tail_ratio": self.tail_ratio}


def graph_bias_stats(graph, item_counts: np.ndarray,
                     tail_quantile: float = 0.8) -> BiasStats:
    """Popularity profile of a graph's neighbor endpoints.

    avg_pop averages ln(1 + n_j) over every stored edge's target; the tail
    ratio is the fraction of targets whose raw count is at or below the
    ``tail_quantile`` empirical quantile of all item counts.
    """
    if not 0.0 < tail_quantile < 1.0:
        raise ConfigError(f"tail_quantile must be in (0, 1), got {tail_quantile}")
    mat = graph.mat if hasattr(graph, "mat") else graph.tocsr()
    if mat.nnz == 0:
        raise ContractError("bias stats of an empty graph")
    counts = np.asarray(item_counts, dtype=np.float64)
    endpoints = mat.tocoo().col
    pop = np.log1p(counts[endpoints])
    threshold = float(np.quantile(counts, tail_quantile))
    tail = counts[endpoints] <= threshold
    return BiasStats(avg_pop=float(pop.mean()), tail_ratio=float(tail.mean()))


def debias_report(base_graph, cf_graph, dataset: Dataset,
                  tail_quantile: float = 0.8) -> dict[str, dict[str, float]]:
    counts = dataset.item_pop
    return {
        "base": graph_bias_stats(base_graph, counts, tail_quantile).to_dict(),
        "counterfactual": graph_bias_stats(cf_graph, counts, tail_quantile).to_dict(),
    }
