"""Synthetic fixtures for tests, demos, and property checks.

``make_planted_dataset`` builds a small instance with disjoint user/item
preference blocks and block-indicator features, so a working model can
memorize it quickly.  ``make_zipf_instance`` pairs random unit features
with a heavy-tailed popularity profile for debiasing checks.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Dataset, InteractionTable, split_dataset
from .fileformats import write_features


def make_planted_dataset(n_users: int = 50, n_items: int = 40, n_blocks: int = 4,
                         feat_dim: int = 8, noise: float = 0.1,
                         seed: int = 0) -> Dataset:
    """Users interact with every item of their block; features are the
    block indicator plus Gaussian noise, independently per modality."""
    if n_items % n_blocks != 0 or feat_dim < n_blocks:
        raise ValueError("need n_items divisible by n_blocks and feat_dim >= n_blocks")
    rng = np.random.default_rng(seed)
    items_per_block = n_items // n_blocks
    user_block = np.arange(n_users) % n_blocks
    item_block = np.arange(n_items) // items_per_block

    edges = [(u, i) for u in range(n_users) for i in range(n_items)
             if item_block[i] == user_block[u]]
    table = InteractionTable(
        user_count=n_users, item_count=n_items,
        edges=np.asarray(edges, dtype=np.int64),
        user_ids=[f"u{k}" for k in range(n_users)],
        item_ids=[f"i{k}" for k in range(n_items)])
    dataset = split_dataset(table, seed=seed)

    for modality in ("text", "visual"):
        base = np.zeros((n_items, feat_dim))
        base[np.arange(n_items), item_block] = 1.0
        dataset.attach_features(modality, base + noise * rng.normal(size=base.shape))
    return dataset


def make_zipf_instance(n_items: int = 500, dim: int = 16,
                       zipf_exponent: float = 1.2, max_count: int = 1000,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Random unit-norm item features plus a fixed Zipf popularity curve.

    Returns (features, counts); counts[j] = round(max_count / (j+1)^a), so
    item 0 is the most popular and the tail decays polynomially.
    """
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n_items, dim))
    features /= np.linalg.norm(features, axis=1, keepdims=True)
    ranks = np.arange(1, n_items + 1, dtype=np.float64)
    counts = np.round(max_count / np.power(ranks, zipf_exponent)).astype(np.int64)
    return features, counts


def write_fixture_files(out_dir, n_users: int = 50, n_items: int = 40,
                        n_blocks: int = 4, feat_dim: int = 8,
                        noise: float = 0.1, seed: int = 0) -> dict[str, Path]:
    """Write a planted instance as TSV interactions plus feature files, the
    exact inputs the `prepare` command expects."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = make_planted_dataset(n_users, n_items, n_blocks, feat_dim, noise, seed)
    paths = {
        "interactions": out / "interactions.tsv",
        "text": out / "features_text.mmf",
        "visual": out / "features_visual.mmf",
    }
    table = dataset.interactions
    with open(paths["interactions"], "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\n")
        for u, i in table.edges:
            fh.write(f"{table.user_ids[u]}\t{table.item_ids[i]}\n")
    write_features(paths["text"], dataset.features["text"].values)
    write_features(paths["visual"], dataset.features["visual"].values)
    return paths


def main(argv=None) -> int:  # pragma: no cover - convenience entry point
    import argparse

    parser = argparse.ArgumentParser(
        description="write a small synthetic fixture (TSV + feature files)")
    parser.add_argument("out_dir")
    parser.add_argument("--users", type=int, default=50)
    parser.add_argument("--items", type=int, default=40)
    parser.add_argument("--blocks", type=int, default=4)
    parser.add_argument("--feat-dim", type=int, default=8)
    parser.add_argument("--noise", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    paths = write_fixture_files(args.out_dir, args.users, args.items, args.blocks,
                                args.feat_dim, args.noise, args.seed)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
