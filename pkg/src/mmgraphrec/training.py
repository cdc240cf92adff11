"""Initialization, Adam, and the epoch loop with early stopping.

One run: initialize projections (Xavier), freeze the pre-built graph, then
per epoch shuffle the training pairs, resample negatives, walk batches
(forward, backward, Adam step), and evaluate validation Recall@20; stop
after ``patience`` evaluations without improvement and restore the best
snapshot.  Every random draw flows from generators seeded by the run seed,
so a run is reproducible bit-for-bit.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import RunConfig
from .data import Dataset, FeatureMatrix, TRAIN, VALID
from .errors import ConfigError, ContractError, NumericsError, ShapeError
from .evaluation import evaluate
from .fileformats import read_checkpoint, write_checkpoint
from .identity import ProjectionParams, positional_encoding, stack_node_features
from .model import GraphRecommender, LossWeights

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("full", "no_maic", "no_cna", "no_sce", "no_mm")


def xavier_init(shape, seed: int, name: str = "") -> Tensor:
    """Xavier-uniform weight (or zero bias) tensor, deterministic per
    (shape, seed, name)."""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        values = np.zeros(shape)
    elif len(shape) == 2:
        fan_in, fan_out = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        values = rng.uniform(-bound, bound, size=shape)
    else:
        raise ConfigError(f"xavier_init supports 1-D and 2-D shapes, got {shape}")
    return ad.parameter(values, name=name)


def init_projection_params(dim_text: int, dim_visual: int, d: int,
                           seed: int) -> ProjectionParams:
    return ProjectionParams(
        w_text=xavier_init((dim_text, d), seed, "w_text"),
        b_text=xavier_init((d,), seed, "b_text"),
        w_visual=xavier_init((dim_visual, d), seed, "w_visual"),
        b_visual=xavier_init((d,), seed, "b_visual"),
        w_gate_text=xavier_init((d, d), seed, "w_gate_text"),
        b_gate_text=xavier_init((d,), seed, "b_gate_text"),
        w_gate_visual=xavier_init((d, d), seed, "w_gate_visual"),
        b_gate_visual=xavier_init((d,), seed, "b_gate_visual"))


@dataclass
class TrainerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 20
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "TrainerConfig":
        return cls(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                   eps_adam=cfg.eps_adam, batch_size=cfg.batch_size,
                   max_epochs=cfg.max_epochs, patience=cfg.patience,
                   seed=cfg.seed, eval_every=cfg.eval_every)


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: list[Tensor], state: AdamState, cfg: TrainerConfig) -> None:
    """Bias-corrected Adam update; a missing grad counts as zero."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(grad)):
            raise NumericsError(f"non-finite gradient for {p.name or 'parameter'}")
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * grad * grad
        p.data = p.data - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)


def build_model(dataset: Dataset, cfg: RunConfig) -> GraphRecommender:
    """Assemble parameters, stacked raw features, and encodings for a run."""
    cfg.validate()
    dim_t = dataset.features["text"].dim
    dim_v = dataset.features["visual"].dim
    params = init_projection_params(dim_t, dim_v, cfg.d, cfg.seed)
    n_nodes = dataset.n_users + dataset.n_items
    return GraphRecommender(
        params=params,
        x_text=stack_node_features(dataset, "text"),
        x_visual=stack_node_features(dataset, "visual"),
        pe=positional_encoding(n_nodes, cfg.d),
        n_users=dataset.n_users, n_items=dataset.n_items,
        alpha_p=cfg.alpha_p, alpha_m=cfg.alpha_m, n_layers=cfg.n_layers,
        gates_enabled=cfg.gates_enabled)


def sample_epoch_negatives(rng: np.random.Generator, dataset: Dataset,
                           n_neg: int) -> np.ndarray:
    """(n_train_pairs, n_neg) items outside each pair's user positives,
    drawn uniformly without replacement, fresh each call."""
    edges = dataset.edges_of(TRAIN)
    pos_by_user = dataset.items_by_user(TRAIN)
    complements: dict[int, np.ndarray] = {}
    all_items = np.arange(dataset.n_items)
    out = np.empty((len(edges), n_neg), dtype=np.int64)
    for row, (u, _) in enumerate(edges):
        comp = complements.get(int(u))
        if comp is None:
            comp = np.setdiff1d(all_items, pos_by_user[u], assume_unique=False)
            if len(comp) < n_neg:
                raise ConfigError(
                    f"user {u} has only {len(comp)} non-positive items; "
                    f"cannot draw {n_neg} negatives without replacement")
            complements[int(u)] = comp
        out[row] = rng.choice(comp, size=n_neg, replace=False)
    return out


def _check_negatives(users: np.ndarray, negs: np.ndarray,
                     pos_sets: list[set[int]]) -> None:
    for u, row in zip(users, negs):
        positives = pos_sets[int(u)]
        for item in row:
            if int(item) in positives:
                raise ContractError(
                    f"negative {int(item)} is a training positive of user {int(u)}")


def snapshot_params(params: ProjectionParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.named().items()}


def restore_params(params: ProjectionParams, state: dict[str, np.ndarray]) -> None:
    for name, tensor in params.named().items():
        tensor.data = np.asarray(state[name], dtype=np.float64).reshape(tensor.shape)


def save_checkpoint(path, params: ProjectionParams) -> None:
    write_checkpoint(path, snapshot_params(params))


def load_checkpoint(path, params: ProjectionParams) -> None:
    state = read_checkpoint(path)
    for name, tensor in params.named().items():
        if name not in state:
            raise ShapeError(f"{path}: checkpoint is missing tensor {name!r}",
                             artifact=True)
        if tuple(state[name].shape) != tensor.shape:
            raise ShapeError(
                f"{path}: tensor {name!r} has shape {state[name].shape}, "
                f"model expects {tensor.shape}", artifact=True)
    restore_params(params, state)


@dataclass
class RunResult:
    history: list[dict]
    best_epoch: int
    best_metric: float
    epochs_run: int


def train(dataset: Dataset, adjacency, model: GraphRecommender,
          trainer: TrainerConfig, weights: LossWeights) -> RunResult:
    """Run the epoch loop; on return the model holds the best snapshot."""
    weights.validate()
    edges = dataset.edges_of(TRAIN)
    if len(edges) == 0:
        raise ContractError("training requires at least one training edge")
    pos_sets = [set(items.tolist()) for items in dataset.items_by_user(TRAIN)]
    rng = np.random.default_rng(trainer.seed)
    opt = AdamState()
    params = model.params.all()

    history: list[dict] = []
    best_metric = -np.inf
    best_epoch = 0
    best_state = snapshot_params(model.params)
    stale_evals = 0
    epoch = 0
    for epoch in range(1, trainer.max_epochs + 1):
        order = rng.permutation(len(edges))
        negatives = sample_epoch_negatives(rng, dataset, weights.n_neg)
        sums: dict[str, float] = {}
        for start in range(0, len(edges), trainer.batch_size):
            batch_rows = order[start:start + trainer.batch_size]
            users = edges[batch_rows, 0]
            pos_items = edges[batch_rows, 1]
            negs = negatives[batch_rows]
            _check_negatives(users, negs, pos_sets)
            for p in params:
                p.zero_grad()
            try:
                with Tape() as tape:
                    parts = model.batch_loss(adjacency, users, pos_items, negs, weights)
                    tape.backward(parts.total)
                adam_step(params, opt, trainer)
            except NumericsError as err:
                log.error("numerical failure at epoch %d, batch row %d: %s",
                          epoch, start // trainer.batch_size, err)
                raise NumericsError(
                    f"epoch {epoch}, batch {start // trainer.batch_size}: {err}") from err
            step_scalars = parts.scalars()
            log.debug("epoch %d batch %d: %s", epoch, start // trainer.batch_size,
                      step_scalars)
            for key, value in step_scalars.items():
                sums[key] = sums.get(key, 0.0) + value * len(batch_rows)
        record = {"epoch": epoch}
        record.update({k: v / len(edges) for k, v in sums.items()})

        if epoch % trainer.eval_every == 0:
            user_emb, item_emb = model.final_embeddings(adjacency)
            val = evaluate(user_emb, item_emb, dataset, ks=(20,), split=VALID)
            metric = val.recall[20]
            record["val_recall@20"] = metric
            if metric > best_metric:
                best_metric = metric
                best_epoch = epoch
                best_state = snapshot_params(model.params)
                stale_evals = 0
            else:
                stale_evals += 1
            history.append(record)
            if stale_evals >= trainer.patience:
                log.info("early stop at epoch %d (best %.5f at epoch %d)",
                         epoch, best_metric, best_epoch)
                break
        else:
            history.append(record)

    restore_params(model.params, best_state)
    return RunResult(history=history, best_epoch=best_epoch,
                     best_metric=float(best_metric), epochs_run=epoch)


def ablation_config(variant: str, cfg: RunConfig) -> RunConfig:
    """Derive the configuration for one ablation variant."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; "
                          f"expected one of {ABLATION_VARIANTS}")
    out = replace(cfg, ablation=variant)
    if variant == "no_maic":
        out = replace(out, gates_enabled=False)
    elif variant == "no_cna":
        out = replace(out, eta=0.0)
    elif variant == "no_sce":
        out = replace(out, lambda_structural=0.0)
    elif variant == "no_mm":
        out = replace(out, random_features=True)
    return out


def substitute_random_features(dataset: Dataset, seed: int) -> Dataset:
    """Replace both modality matrices with seeded random unit-norm rows,
    keeping dimensions; used by the content-free ablation."""
    out = Dataset(interactions=dataset.interactions, split=dataset.split,
                  item_pop=dataset.item_pop)
    for modality, feats in dataset.features.items():
        rng = np.random.default_rng([seed, zlib.crc32(modality.encode("utf-8"))])
        rows = rng.normal(size=(feats.rows, feats.dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        out.features[modality] = FeatureMatrix(modality, rows)
    return out


def apply_ablation(dataset: Dataset, cfg: RunConfig) -> Dataset:
    """Dataset-level effect of the configured ablation (feature swap)."""
    if cfg.random_features:
        return substitute_random_features(dataset, cfg.seed)
    return dataset
