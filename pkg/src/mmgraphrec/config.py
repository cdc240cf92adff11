"""Resolved run configuration shared by every CLI command.

Precedence: built-in defaults < JSON config file < command-line flags.
The fully resolved configuration is written into each run manifest so any
artifact can be reproduced from its manifest alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path

from .errors import ConfigError
from .graph import GraphConfig
from .model import LossWeights


@dataclass
class RunConfig:
    # representation
    d: int = 64
    alpha_p: float = 0.5
    alpha_m: float = 0.5
    n_layers: int = 2
    # losses
    tau: float = 0.2
    tau_align: float = 0.2
    tau_disc: float = 0.2
    lambda_modal: float = 0.01
    lambda_structural: float = 0.01
    n_neg: int = 32
    # graph construction
    lambda_cf: float = 0.1
    eps_cf: float = 1e-8
    eta: float = 0.2
    k_base: int = 10
    k_user: int = 10
    k_cf: int = 10
    block_size: int = 1024
    # optimization
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 20
    eval_every: int = 1
    seed: int = 0
    # data preparation
    k_core: int = 5
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # evaluation and diagnostics
    ks: tuple[int, ...] = (10, 20)
    tail_quantile: float = 0.8
    sparsity_boundaries: tuple[int, ...] = (5, 10, 20)
    # ablation switches
    ablation: str = "full"
    gates_enabled: bool = True
    random_features: bool = False

    def validate(self) -> None:
        if self.d < 2 or self.d % 2 != 0:
            raise ConfigError(f"embedding dimension must be even and >= 2, got {self.d}")
        for name in ("alpha_p", "alpha_m"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {val}")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        for name in ("tau", "tau_align", "tau_disc", "lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_modal", "lambda_structural", "lambda_cf", "eta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.eps_cf <= 0:
            raise ConfigError("eps_cf must be positive")
        if self.n_neg < 1:
            raise ConfigError("n_neg must be >= 1")
        if not 0.0 < self.tail_quantile < 1.0:
            raise ConfigError("tail_quantile must be in (0, 1)")
        if self.ablation not in ("full", "no_maic", "no_cna", "no_sce", "no_mm"):
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if len(self.ks) == 0 or any(k < 1 for k in self.ks):
            raise ConfigError("ks must be positive cut-offs")

    def graph_config(self) -> GraphConfig:
        return GraphConfig(k_base=self.k_base, k_user=self.k_user, k_cf=self.k_cf,
                           lambda_cf=self.lambda_cf, eps=self.eps_cf, eta=self.eta,
                           block_size=self.block_size)

    def loss_weights(self) -> LossWeights:
        return LossWeights(tau=self.tau, tau_align=self.tau_align,
                           tau_disc=self.tau_disc, lambda_modal=self.lambda_modal,
                           lambda_structural=self.lambda_structural, n_neg=self.n_neg)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["split_ratios"] = list(self.split_ratios)
        out["ks"] = list(self.ks)
        out["sparsity_boundaries"] = list(self.sparsity_boundaries)
        return out

    @classmethod
    def resolve(cls, config_path=None, overrides: dict | None = None) -> "RunConfig":
        """Apply precedence: defaults, then JSON file, then explicit flags."""
        values: dict = {}
        if config_path is not None:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
            if not isinstance(loaded, dict):
                raise ConfigError(f"{config_path}: config file must hold a JSON object")
            values.update(loaded)
        if overrides:
            values.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for name in ("split_ratios", "ks", "sparsity_boundaries"):
            if name in values:
                values[name] = tuple(values[name])
        cfg = cls(**values)
        cfg.validate()
        return cfg


def write_manifest(path, cfg: RunConfig, **extra) -> None:
    """Resolved config plus provenance notes; `created_at` is the only
    field expected to differ between identical reruns."""
    payload = {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "config": cfg.to_dict(),
        "graph_semantics": "raw-feature fused cosine (parameter-independent, frozen)",
    }
    payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
