"""Content-aware identity representations.

Nodes have no learnable ID embeddings.  Instead, each node owns a static
sinusoidal positional encoding which is modulated elementwise by gates
computed from its projected textual and visual content; adding the
modulated encoding to the fused modality projections yields the initial
identity representation that seeds graph propagation.

Node order everywhere is users first (positions 0..n_users-1), then items.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, FeatureMatrix, TRAIN
from .errors import ConfigError, ContractError, ShapeError

MODALITIES = ("text", "visual")


@dataclass
class ProjectionParams:
    """Learnable projection and gate parameters, one set per modality."""

    w_text: Tensor     # (dim_text, d)
    b_text: Tensor     # (d,)
    w_visual: Tensor   # (dim_visual, d)
    b_visual: Tensor   # (d,)
    w_gate_text: Tensor    # (d, d)
    b_gate_text: Tensor    # (d,)
    w_gate_visual: Tensor  # (d, d)
    b_gate_visual: Tensor  # (d,)

    def projection(self, modality: str) -> tuple[Tensor, Tensor]:
        if modality == "text":
            return self.w_text, self.b_text
        if modality == "visual":
            return self.w_visual, self.b_visual
        raise ConfigError(f"unknown modality {modality!r}")

    def gate(self, modality: str) -> tuple[Tensor, Tensor]:
        if modality == "text":
            return self.w_gate_text, self.b_gate_text
        if modality == "visual":
            return self.w_gate_visual, self.b_gate_visual
        raise ConfigError(f"unknown modality {modality!r}")

    def named(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.all()}

    def all(self) -> list[Tensor]:
        return [self.w_text, self.b_text, self.w_visual, self.b_visual,
                self.w_gate_text, self.b_gate_text,
                self.w_gate_visual, self.b_gate_visual]

    @property
    def dim(self) -> int:
        return self.w_text.shape[1]


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Static sinusoidal encoding over dense node positions (not trainable)."""
    if d % 2 != 0:
        raise ConfigError(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    angles = pos * rates[None, :]
    out = np.empty((n, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def build_user_features(dataset: Dataset, features: FeatureMatrix) -> np.ndarray:
    """Average each user's training-item feature rows (training edges only)."""
    train = dataset.edges_of(TRAIN)
    counts = np.bincount(train[:, 0], minlength=dataset.n_users).astype(np.float64)
    if (counts == 0).any():
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ContractError(f"user {empty} has no training interactions")
    sums = np.zeros((dataset.n_users, features.dim), dtype=np.float64)
    np.add.at(sums, train[:, 0], features.values[train[:, 1]])
    return sums / counts[:, None]


def stack_node_features(dataset: Dataset, modality: str) -> np.ndarray:
    """Raw feature rows for all nodes: averaged per user, then per item."""
    feats = dataset.features[modality]
    return np.concatenate([build_user_features(dataset, feats), feats.values], axis=0)


def project_modality(x, params: ProjectionParams, modality: str) -> Tensor:
    """Project raw feature rows into the shared space: LN(tanh(x W + b))."""
    w, b = params.projection(modality)
    xt = x if isinstance(x, Tensor) else ad.constant(x)
    if xt.shape[1] != w.shape[0]:
        raise ShapeError(
            f"{modality} features have dim {xt.shape[1]}, projection expects {w.shape[0]}")
    return ad.layer_norm(ad.tanh(ad.add(ad.matmul(xt, w), b)))


def modality_gates(z_text: Tensor, z_visual: Tensor,
                   params: ProjectionParams) -> tuple[Tensor, Tensor]:
    """Per-node sigmoid gates derived from each modality's projection."""
    wt, bt = params.gate("text")
    wv, bv = params.gate("visual")
    gamma_t = ad.sigmoid(ad.add(ad.matmul(z_text, wt), bt))
    gamma_v = ad.sigmoid(ad.add(ad.matmul(z_visual, wv), bv))
    return gamma_t, gamma_v


def _convex_mix(a: Tensor, b: Tensor, weight: float) -> Tensor:
    """weight * a + (1 - weight) * b, exact at the endpoints and bit-stable
    when both operands are identical (computed as b + weight * (a - b))."""
    if weight == 1.0:
        return a
    if weight == 0.0:
        return b
    return ad.add(b, ad.scalar_mul(ad.sub(a, b), weight))


def modulate_pe(gamma_t: Tensor, gamma_v: Tensor, pe: Tensor,
                alpha_p: float) -> tuple[Tensor, Tensor]:
    """Fuse the two gates and contract the base encoding elementwise."""
    if not 0.0 <= alpha_p <= 1.0:
        raise ConfigError(f"alpha_p must lie in [0, 1], got {alpha_p}")
    gate = _convex_mix(gamma_t, gamma_v, alpha_p)
    modulated = ad.elementwise_mul(gate, pe)
    return gate, modulated


def build_identity(z_text: Tensor, z_visual: Tensor, pe_mod: Tensor,
                   alpha_m: float) -> Tensor:
    """alpha_m * (z_text + pe') + (1 - alpha_m) * (z_visual + pe')."""
    if not 0.0 <= alpha_m <= 1.0:
        raise ConfigError(f"alpha_m must lie in [0, 1], got {alpha_m}")
    text_side = ad.add(z_text, pe_mod)
    visual_side = ad.add(z_visual, pe_mod)
    if alpha_m == 1.0:
        return text_side
    if alpha_m == 0.0:
        return visual_side
    return ad.add(ad.scalar_mul(text_side, alpha_m),
                  ad.scalar_mul(visual_side, 1.0 - alpha_m))


@dataclass
class IdentityBundle:
    """Everything the identity stage produces for one forward pass."""

    z_text: Tensor
    z_visual: Tensor
    gate: Tensor | None     # None when gating is disabled
    pe_modulated: Tensor
    e0: Tensor


def identity_forward(params: ProjectionParams, x_text: np.ndarray,
                     x_visual: np.ndarray, pe: np.ndarray, alpha_p: float,
                     alpha_m: float, gates_enabled: bool = True) -> IdentityBundle:
    """Run the full identity chain over stacked node features."""
    pe_t = ad.constant(pe, name="positional_encoding")
    z_t = project_modality(x_text, params, "text")
    z_v = project_modality(x_visual, params, "visual")
    if gates_enabled:
        gamma_t, gamma_v = modality_gates(z_t, z_v, params)
        gate, pe_mod = modulate_pe(gamma_t, gamma_v, pe_t, alpha_p)
    else:
        gate, pe_mod = None, pe_t
    e0 = build_identity(z_t, z_v, pe_mod, alpha_m)
    return IdentityBundle(z_text=z_t, z_visual=z_v, gate=gate,
                          pe_modulated=pe_mod, e0=e0)


def semantic_alignment_score(identity_rows: np.ndarray,
                             anchor_rows: np.ndarray) -> float:
    """Mean per-row cosine between identity vectors and content anchors."""
    a = np.asarray(identity_rows, dtype=np.float64)
    b = np.asarray(anchor_rows, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"alignment inputs differ: {a.shape} vs {b.shape}")
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-12
    return float(np.mean(num / den))
