"""Differentiable forward pass: propagation, losses, and scoring.

Node tensors are (n_users + n_items, d) with users first.  All
softmax-style losses are assembled from cosine logits and row-wise
log-sum-exp, never from raw exponentials, so small temperatures stay
stable.  Ranking uses plain inner products; the ranking loss itself is
cosine-based and therefore invariant to a global rescaling of the final
embeddings, which rescales scores without changing their order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .graph import fuse_item_semantics
from .identity import IdentityBundle, ProjectionParams, identity_forward

NEG_MASK = -1e30  # additive mask: exp(NEG_MASK - anything finite) underflows to 0


@dataclass
class PropagationOutput:
    """Per-layer embeddings and their mean readout."""

    layers: list[Tensor]  # length n_layers + 1, each (n_nodes, d)
    final: Tensor         # mean over layers 0..L


def propagate(adjacency, e0: Tensor, n_layers: int) -> PropagationOutput:
    """Repeated multiplication by the normalized adjacency, mean readout."""
    if n_layers < 0:
        raise ShapeError(f"layer count must be >= 0, got {n_layers}")
    if adjacency.shape[0] != adjacency.shape[1] or adjacency.shape[0] != e0.shape[0]:
        raise ShapeError(
            f"adjacency {adjacency.shape} does not match embeddings {e0.shape}")
    layers = [e0]
    current = e0
    for _ in range(n_layers):
        current = ad.sparse_dense_matmul(adjacency, current)
        layers.append(current)
    total = layers[0]
    for layer in layers[1:]:
        total = ad.add(total, layer)
    final = ad.scalar_mul(total, 1.0 / len(layers))
    return PropagationOutput(layers=layers, final=final)


@dataclass
class LossWeights:
    tau: float = 0.2
    tau_align: float = 0.2
    tau_disc: float = 0.2
    lambda_modal: float = 0.01
    lambda_structural: float = 0.01
    n_neg: int = 32

    def validate(self) -> None:
        for name, val in (("tau", self.tau), ("tau_align", self.tau_align),
                          ("tau_disc", self.tau_disc)):
            if val <= 0:
                raise ContractError(f"{name} must be positive, got {val}")
        if self.lambda_modal < 0 or self.lambda_structural < 0:
            raise ContractError("loss weights must be non-negative")
        if self.n_neg < 1:
            raise ContractError(f"n_neg must be >= 1, got {self.n_neg}")


def _positive_mask(row_ids: np.ndarray, col_ids: np.ndarray,
                   pairs_rows: np.ndarray, pairs_cols: np.ndarray) -> np.ndarray:
    """0 where (row, col) is a batch positive, NEG_MASK elsewhere."""
    row_pos = {int(v): k for k, v in enumerate(row_ids)}
    col_pos = {int(v): k for k, v in enumerate(col_ids)}
    mask = np.full((len(row_ids), len(col_ids)), NEG_MASK)
    for r, c in zip(pairs_rows, pairs_cols):
        mask[row_pos[int(r)], col_pos[int(c)]] = 0.0
    return mask


def _contrast_side(anchor: Tensor, candidates: Tensor, mask: np.ndarray,
                   tau: float) -> Tensor:
    """Mean over anchors of LSE(all logits) - LSE(positive logits)."""
    logits = ad.scalar_mul(ad.cosine_matrix(anchor, candidates), 1.0 / tau)
    lse_all = ad.logsumexp_rows(logits)
    lse_pos = ad.logsumexp_rows(ad.add(logits, ad.constant(mask)))
    return ad.mean_rows(ad.sub(lse_all, lse_pos))


def alignment_loss(e0: Tensor, e1: Tensor, users: np.ndarray, items: np.ndarray,
                   tau_align: float, n_users: int) -> Tensor:
    """Pull pre-propagation identities toward one-hop structural views.

    For each distinct batch user, positives are the in-batch items it
    interacted with and candidates are all distinct batch items; the item
    side mirrors this against batch users.  Both directions always yield
    non-negative values because the positive set is a subset of the
    candidate set.
    """
    if len(users) == 0:
        raise ContractError("alignment loss needs a nonempty batch")
    batch_users = np.unique(users)
    batch_items = np.unique(items)
    e0_u = ad.gather_rows(e0, batch_users)
    e1_i = ad.gather_rows(e1, n_users + batch_items)
    user_mask = _positive_mask(batch_users, batch_items, users, items)
    loss_u = _contrast_side(e0_u, e1_i, user_mask, tau_align)

    e0_i = ad.gather_rows(e0, n_users + batch_items)
    e1_u = ad.gather_rows(e1, batch_users)
    item_mask = _positive_mask(batch_items, batch_users, items, users)
    loss_i = _contrast_side(e0_i, e1_u, item_mask, tau_align)
    return ad.add(loss_u, loss_i)


def _discrimination_side(e0_rows: Tensor, anchor_rows: Tensor,
                         final_rows: Tensor, tau: float) -> Tensor:
    e0n = ad.l2_normalize_rows(e0_rows)
    anchor_n = ad.l2_normalize_rows(anchor_rows)
    final_n = ad.l2_normalize_rows(final_rows)
    numerator = ad.scalar_mul(ad.row_dot(e0n, anchor_n), 1.0 / tau)
    logits = ad.scalar_mul(ad.matmul(e0n, final_n, transpose_b=True), 1.0 / tau)
    return ad.mean_rows(ad.sub(ad.logsumexp_rows(logits), numerator))


def discrimination_loss(e0: Tensor, anchors: Tensor, final: Tensor,
                        users: np.ndarray, items: np.ndarray,
                        tau_disc: float, n_users: int) -> Tensor:
    """Keep identities close to their raw fused content while separating
    them from the propagated views of the batch.

    The numerator pairs each node with its own content anchor; the
    denominator ranges over the batch's final representations, so the
    value can be negative.
    """
    if len(users) == 0:
        raise ContractError("discrimination loss needs a nonempty batch")
    batch_users = np.unique(users)
    batch_items = np.unique(items) + n_users
    loss_i = _discrimination_side(ad.gather_rows(e0, batch_items),
                                  ad.gather_rows(anchors, batch_items),
                                  ad.gather_rows(final, batch_items), tau_disc)
    loss_u = _discrimination_side(ad.gather_rows(e0, batch_users),
                                  ad.gather_rows(anchors, batch_users),
                                  ad.gather_rows(final, batch_users), tau_disc)
    return ad.add(loss_u, loss_i)


def sce_loss(alignment: Tensor, discrimination: Tensor) -> Tensor:
    return ad.add(alignment, discrimination)


def ranking_loss(final: Tensor, users: np.ndarray, pos_items: np.ndarray,
                 neg_items: np.ndarray, tau: float, n_users: int) -> Tensor:
    """Softmax ranking over cosine logits of negatives shifted by the
    positive: mean over samples of LSE(cos_neg / tau) - cos_pos / tau."""
    if neg_items.ndim != 2 or len(users) != len(pos_items) or len(users) != len(neg_items):
        raise ShapeError("ranking batch arrays are inconsistent")
    b, k = neg_items.shape
    user_rows = ad.l2_normalize_rows(ad.gather_rows(final, users))
    pos_rows = ad.l2_normalize_rows(ad.gather_rows(final, n_users + pos_items))
    pos_cos = ad.row_dot(user_rows, pos_rows)

    flat_negs = neg_items.reshape(-1)
    neg_rows = ad.l2_normalize_rows(ad.gather_rows(final, n_users + flat_negs))
    user_rep = ad.gather_rows(user_rows, np.repeat(np.arange(b), k))
    neg_cos = ad.reshape(ad.row_dot(user_rep, neg_rows), (b, k))

    lse_neg = ad.logsumexp_rows(ad.scalar_mul(neg_cos, 1.0 / tau))
    return ad.mean_rows(ad.sub(lse_neg, ad.scalar_mul(pos_cos, 1.0 / tau)))


def modal_infonce(z_text: Tensor, z_visual: Tensor, item_batch: np.ndarray,
                  tau: float, n_users: int) -> Tensor:
    """Symmetric in-batch InfoNCE aligning the two modality projections."""
    if len(item_batch) == 0:
        raise ContractError("modal InfoNCE needs a nonempty item batch")
    rows = n_users + np.unique(item_batch)
    zt = ad.l2_normalize_rows(ad.gather_rows(z_text, rows))
    zv = ad.l2_normalize_rows(ad.gather_rows(z_visual, rows))
    diag = ad.scalar_mul(ad.row_dot(zt, zv), 1.0 / tau)
    logits_t = ad.scalar_mul(ad.matmul(zt, zv, transpose_b=True), 1.0 / tau)
    logits_v = ad.scalar_mul(ad.matmul(zv, zt, transpose_b=True), 1.0 / tau)
    side_t = ad.mean_rows(ad.sub(ad.logsumexp_rows(logits_t), diag))
    side_v = ad.mean_rows(ad.sub(ad.logsumexp_rows(logits_v), diag))
    return ad.scalar_mul(ad.add(side_t, side_v), 0.5)


@dataclass
class LossParts:
    ranking: Tensor
    modal: Tensor | None
    structural: Tensor | None
    total: Tensor

    def scalars(self) -> dict[str, float]:
        out = {"loss_rec": self.ranking.item(), "loss_total": self.total.item()}
        out["loss_modal"] = self.modal.item() if self.modal is not None else 0.0
        out["loss_sce"] = self.structural.item() if self.structural is not None else 0.0
        return out


def total_loss(ranking: Tensor, modal: Tensor | None, structural: Tensor | None,
               weights: LossWeights) -> LossParts:
    """ranking + lambda_modal * modal + lambda_structural * structural."""
    total = ranking
    if modal is not None and weights.lambda_modal != 0.0:
        total = ad.add(total, ad.scalar_mul(modal, weights.lambda_modal))
    if structural is not None and weights.lambda_structural != 0.0:
        total = ad.add(total, ad.scalar_mul(structural, weights.lambda_structural))
    return LossParts(ranking=ranking, modal=modal, structural=structural, total=total)


def score(e_u: np.ndarray, e_i: np.ndarray) -> float:
    """Preference score: plain inner product (ranking uses this, not cosine)."""
    return float(np.dot(np.asarray(e_u, dtype=np.float64),
                        np.asarray(e_i, dtype=np.float64)))


@dataclass
class ForwardPass:
    identity: IdentityBundle
    propagation: PropagationOutput
    anchors: Tensor  # fused modality projections, the content anchor per node


@dataclass
class GraphRecommender:
    """Stateless forward logic over a frozen graph and learnable params."""

    params: ProjectionParams
    x_text: np.ndarray      # (n_nodes, dim_text) stacked raw features
    x_visual: np.ndarray    # (n_nodes, dim_visual)
    pe: np.ndarray          # (n_nodes, d) static positional encodings
    n_users: int
    n_items: int
    alpha_p: float = 0.5
    alpha_m: float = 0.5
    n_layers: int = 2
    gates_enabled: bool = True

    def forward(self, adjacency) -> ForwardPass:
        bundle = identity_forward(self.params, self.x_text, self.x_visual, self.pe,
                                  self.alpha_p, self.alpha_m, self.gates_enabled)
        prop = propagate(adjacency, bundle.e0, self.n_layers)
        anchors = fuse_item_semantics(bundle.z_text, bundle.z_visual, self.alpha_m)
        return ForwardPass(identity=bundle, propagation=prop, anchors=anchors)

    def final_embeddings(self, adjacency) -> tuple[np.ndarray, np.ndarray]:
        """Evaluation-time user and item matrices (no gradient tracking)."""
        out = self.forward(adjacency)
        final = out.propagation.final.data
        return final[:self.n_users], final[self.n_users:]

    def batch_loss(self, adjacency, users: np.ndarray, pos_items: np.ndarray,
                   neg_items: np.ndarray, weights: LossWeights) -> LossParts:
        """Assemble the full objective for one training batch."""
        weights.validate()
        out = self.forward(adjacency)
        final = out.propagation.final
        rank = ranking_loss(final, users, pos_items, neg_items,
                            weights.tau, self.n_users)
        modal = None
        if weights.lambda_modal != 0.0:
            modal = modal_infonce(out.identity.z_text, out.identity.z_visual,
                                  pos_items, weights.tau, self.n_users)
        structural = None
        if weights.lambda_structural != 0.0:
            if len(out.propagation.layers) < 2:
                raise ContractError(
                    "structural losses require at least one propagation layer")
            align = alignment_loss(out.identity.e0, out.propagation.layers[1],
                                   users, pos_items, weights.tau_align, self.n_users)
            disc = discrimination_loss(out.identity.e0, out.anchors, final,
                                       users, pos_items, weights.tau_disc, self.n_users)
            structural = sce_loss(align, disc)
        return total_loss(rank, modal, structural, weights)
