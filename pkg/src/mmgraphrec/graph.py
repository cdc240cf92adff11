"""Item/user neighborhood graphs and the augmented adjacency.

The item-item graph has two parts: a base KNN graph over fused content
vectors, and a counterfactual graph whose neighbor selection divides each
similarity by (pop(j) + eps)^lambda so that low-exposure items can win
slots they would otherwise lose to popular ones.  Selected edges always
carry the *original* similarity as weight.  Both graphs, a user-user KNN
graph, and the binary interaction matrix are assembled into one symmetric
block adjacency and degree-normalized for propagation.

Everything here is a pure function of (features, popularity, config):
similarities are computed with a fixed-order reduction (unoptimized
einsum), so results are bit-identical across runs and across block sizes,
and ties are always broken toward the lower item index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor
from .data import Dataset, TRAIN, compute_popularity
from .errors import ConfigError, ContractError, ShapeError
from .identity import _convex_mix, build_user_features

COSINE_EPS = 1e-12


@dataclass
class SparseMatrix:
    """Compressed-row adjacency with sorted, unique columns per row."""

    mat: sp.csr_matrix

    def __post_init__(self):
        m = self.mat.tocsr()
        m.sort_indices()
        self.mat = m
        if m.nnz and not np.all(np.isfinite(m.data)):
            raise ContractError("sparse matrix holds non-finite values")
        if np.any(np.diff(m.indptr) != np.array([len(np.unique(m.indices[s:e]))
                                                 for s, e in zip(m.indptr[:-1], m.indptr[1:])])):
            raise ContractError("duplicate column indices within a row")

    @property
    def rows(self) -> int:
        return self.mat.shape[0]

    @property
    def cols(self) -> int:
        return self.mat.shape[1]

    @property
    def nnz(self) -> int:
        return self.mat.nnz

    @property
    def indptr(self) -> np.ndarray:
        return self.mat.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.mat.indices

    @property
    def values(self) -> np.ndarray:
        return self.mat.data

    def neighbor_sets(self) -> list[set[int]]:
        return [set(self.indices[s:e].tolist())
                for s, e in zip(self.indptr[:-1], self.indptr[1:])]

    def to_dense(self) -> np.ndarray:
        return self.mat.toarray()


@dataclass
class GraphConfig:
    k_base: int = 10
    k_user: int = 10
    k_cf: int = 10
    lambda_cf: float = 0.1
    eps: float = 1e-8
    eta: float = 0.2
    block_size: int = 1024

    def validate(self, n_users: int, n_items: int) -> None:
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.lambda_cf < 0:
            raise ConfigError(f"lambda_cf must be >= 0, got {self.lambda_cf}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        for name, k, n in (("k_base", self.k_base, n_items),
                           ("k_cf", self.k_cf, n_items),
                           ("k_user", self.k_user, n_users)):
            if not 1 <= k < n:
                raise ConfigError(f"{name}={k} must satisfy 1 <= k < {n}")


def fuse_item_semantics(z_text: Tensor, z_visual: Tensor, alpha_m: float) -> Tensor:
    """Blend projected modality rows: alpha_m * z_text + (1-alpha_m) * z_visual."""
    if z_text.shape != z_visual.shape:
        raise ShapeError(f"fusion inputs differ: {z_text.shape} vs {z_visual.shape}")
    return _convex_mix(z_text, z_visual, alpha_m)


def fused_raw_semantics(feat_text: np.ndarray, feat_visual: np.ndarray,
                        alpha_m: float) -> np.ndarray:
    """Parameter-free content vectors whose pairwise cosines equal
    alpha_m * cos_text + (1 - alpha_m) * cos_visual.

    Each modality is row-normalized, scaled by the square root of its
    fusion weight, and concatenated; rows of the result are unit-norm
    whenever both modality rows are nonzero.
    """
    if feat_text.shape[0] != feat_visual.shape[0]:
        raise ShapeError("modality feature row counts differ")

    def unit_rows(x):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return x / (norms + COSINE_EPS)

    return np.concatenate([np.sqrt(alpha_m) * unit_rows(feat_text),
                           np.sqrt(1.0 - alpha_m) * unit_rows(feat_visual)], axis=1)


def _row_norms(h: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("nd,nd->n", h, h, optimize=False))


def cosine_block(h: np.ndarray, row_range: tuple[int, int],
                 norms: np.ndarray | None = None) -> np.ndarray:
    """Similarity rows [start, stop) against all rows of ``h``.

    Peak memory is O((stop-start) * n).  Diagonal entries are masked to
    -inf so self-similarity never wins neighbor selection.  The product
    uses an unoptimized einsum whose reduction order does not depend on
    the block extent, keeping results identical for every blocking.
    """
    start, stop = row_range
    if not 0 <= start <= stop <= h.shape[0]:
        raise ShapeError(f"invalid row range {row_range} for {h.shape[0]} rows")
    if norms is None:
        norms = _row_norms(h)
    dots = np.einsum("md,nd->mn", h[start:stop], h, optimize=False)
    sims = dots / (norms[start:stop, None] * norms[None, :] + COSINE_EPS)
    cols = np.arange(start, stop)
    sims[np.arange(stop - start), cols] = -np.inf
    return sims


def counterfactual_scores(sims: np.ndarray, pop: np.ndarray,
                          lambda_cf: float, eps: float) -> np.ndarray:
    """Divide each candidate column by (pop(j) + eps)^lambda_cf."""
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    if lambda_cf == 0.0:
        return sims.copy() if sims.ndim else float(sims)
    penalty = np.power(pop + eps, lambda_cf)
    return sims / penalty


def _topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest entries per row, ties toward the
    lower column index (stable sort of the negated scores)."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def _assemble_knn(n: int, k: int, block_rows: list[tuple[int, np.ndarray, np.ndarray]]) -> SparseMatrix:
    rows = np.repeat(np.arange(n), k)
    cols = np.concatenate([idx.reshape(-1) for _, idx, _ in block_rows])
    vals = np.concatenate([w.reshape(-1) for _, _, w in block_rows])
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mat.sort_indices()
    return SparseMatrix(mat)


def base_knn_graph(h: np.ndarray, k: int, block_size: int = 1024) -> SparseMatrix:
    """Top-k neighbors per row by raw cosine; stored weight is the cosine."""
    return _neighbor_graph(h, k, block_size, pop=None, lambda_cf=0.0, eps=1.0)


def user_knn_graph(user_vectors: np.ndarray, k: int, block_size: int = 1024) -> SparseMatrix:
    return base_knn_graph(user_vectors, k, block_size)


def topk_counterfactual(h: np.ndarray, pop: np.ndarray, config: GraphConfig) -> SparseMatrix:
    """Neighbors selected under the popularity-penalized score; weights are
    the original similarities."""
    return _neighbor_graph(h, config.k_cf, config.block_size, pop=pop,
                           lambda_cf=config.lambda_cf, eps=config.eps)


def _neighbor_graph(h: np.ndarray, k: int, block_size: int,
                    pop: np.ndarray | None, lambda_cf: float, eps: float) -> SparseMatrix:
    n = h.shape[0]
    if not 1 <= k < n:
        raise ConfigError(f"k={k} must satisfy 1 <= k < {n}")
    norms = _row_norms(h)
    blocks = []
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        sims = cosine_block(h, (start, stop), norms=norms)
        if pop is not None and lambda_cf != 0.0:
            scored = counterfactual_scores(sims, pop, lambda_cf, eps)
        else:
            scored = sims
        picked = _topk_rows(scored, k)
        weights = np.take_along_axis(sims, picked, axis=1)
        blocks.append((start, picked, weights))
    return _assemble_knn(n, k, blocks)


def fuse_item_graphs(base: SparseMatrix, cf: SparseMatrix, eta: float) -> SparseMatrix:
    """Sparse elementwise sum base + eta * cf; overlapping edges add up."""
    if base.mat.shape != cf.mat.shape:
        raise ShapeError(f"graph shapes differ: {base.mat.shape} vs {cf.mat.shape}")
    if eta == 0.0:
        return SparseMatrix(base.mat.copy())
    return SparseMatrix((base.mat + cf.mat * eta).tocsr())


def _symmetrize_max(mat: sp.csr_matrix) -> sp.csr_matrix:
    return mat.maximum(mat.T).tocsr()


def interaction_matrix(dataset: Dataset) -> sp.csr_matrix:
    """Binary user-item indicator over training edges."""
    edges = dataset.edges_of(TRAIN)
    return sp.csr_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])),
                         shape=(dataset.n_users, dataset.n_items))


def build_augmented_adjacency(r_user: SparseMatrix, r_interact: sp.spmatrix,
                              r_item: SparseMatrix) -> SparseMatrix:
    """Symmetric block adjacency over users then items.

    Both square KNN blocks are symmetrized by the elementwise maximum of
    the matrix and its transpose before assembly; the interaction block
    and its transpose fill the off-diagonal corners.
    """
    n_users = r_user.rows
    n_items = r_item.rows
    if r_user.mat.shape != (n_users, n_users) or r_item.mat.shape != (n_items, n_items):
        raise ShapeError("diagonal blocks must be square")
    if r_interact.shape != (n_users, n_items):
        raise ShapeError(
            f"interaction block is {r_interact.shape}, expected {(n_users, n_items)}")
    for name, block in (("user", r_user.mat), ("item", r_item.mat)):
        if block.diagonal().any():
            raise ContractError(f"{name}-{name} block has self loops")
    uu = _symmetrize_max(r_user.mat)
    ii = _symmetrize_max(r_item.mat)
    r = r_interact.tocsr()
    full = sp.bmat([[uu, r], [r.T, ii]], format="csr")
    return SparseMatrix(full)


def normalize_adjacency(a: SparseMatrix) -> SparseMatrix:
    """Scale entries to A_ij / sqrt(d_i * d_j); zero-degree rows stay zero."""
    mat = a.mat
    if mat.nnz and mat.data.min() < 0:
        raise ContractError("adjacency has negative entries")
    asym = (mat - mat.T).tocsr()
    if asym.nnz and np.abs(asym.data).max() > 0:
        raise ContractError("adjacency is not symmetric")
    degrees = np.asarray(mat.sum(axis=1)).reshape(-1)
    with np.errstate(divide="ignore"):
        inv_sqrt = 1.0 / np.sqrt(degrees)
    inv_sqrt[~np.isfinite(inv_sqrt)] = 0.0
    coo = mat.tocoo()
    # the scale pair is multiplied first so the result is bitwise symmetric
    data = coo.data * (inv_sqrt[coo.row] * inv_sqrt[coo.col])
    return SparseMatrix(sp.csr_matrix((data, (coo.row, coo.col)), shape=mat.shape))


def spectral_radius_estimate(mat: sp.spmatrix, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of the dominant eigenvalue magnitude."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=mat.shape[1])
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iters):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        estimate = norm
        v = w / norm
    return float(estimate)


@dataclass
class GraphBundle:
    """All graphs produced by one construction pass."""

    base: SparseMatrix
    counterfactual: SparseMatrix
    item_aug: SparseMatrix
    user: SparseMatrix
    interactions: sp.csr_matrix
    adjacency: SparseMatrix
    normalized: SparseMatrix


def build_graphs(dataset: Dataset, config: GraphConfig, alpha_m: float) -> GraphBundle:
    """Construct every graph once, from raw features, before training.

    The content vectors use raw (not projected) features so the structure
    does not depend on parameter initialization and can be frozen.
    """
    config.validate(dataset.n_users, dataset.n_items)
    feat_t = dataset.features["text"]
    feat_v = dataset.features["visual"]
    h_items = fused_raw_semantics(feat_t.values, feat_v.values, alpha_m)
    pop = compute_popularity(dataset)
    base = base_knn_graph(h_items, config.k_base, config.block_size)
    cf = topk_counterfactual(h_items, pop, config)
    item_aug = fuse_item_graphs(base, cf, config.eta)
    h_users = fused_raw_semantics(build_user_features(dataset, feat_t),
                                  build_user_features(dataset, feat_v), alpha_m)
    user = user_knn_graph(h_users, config.k_user, config.block_size)
    inter = interaction_matrix(dataset)
    adjacency = build_augmented_adjacency(user, inter, item_aug)
    normalized = normalize_adjacency(adjacency)
    return GraphBundle(base=base, counterfactual=cf, item_aug=item_aug, user=user,
                       interactions=inter, adjacency=adjacency, normalized=normalized)


def propagation_operator(bundle_or_matrix) -> sp.csr_matrix:
    obj = bundle_or_matrix
    if isinstance(obj, GraphBundle):
        return obj.normalized.mat
    if isinstance(obj, SparseMatrix):
        return obj.mat
    return obj.tocsr()
