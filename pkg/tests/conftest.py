import numpy as np
import pytest

from mmgraphrec.data import Dataset, InteractionTable, split_dataset
from mmgraphrec.synthetic import make_planted_dataset


@pytest.fixture
def planted():
    return make_planted_dataset(seed=0)


def build_random_dataset(n_users=5, n_items=6, feat_dim=5, edges_per_user=4, seed=3):
    """Small random instance with features attached; users keep >= 3 edges."""
    rng = np.random.default_rng(seed)
    edges = sorted({(u, int(i)) for u in range(n_users)
                    for i in rng.choice(n_items, size=edges_per_user, replace=False)})
    table = InteractionTable(
        n_users, n_items, np.asarray(edges, dtype=np.int64),
        user_ids=[f"u{k}" for k in range(n_users)],
        item_ids=[f"i{k}" for k in range(n_items)])
    dataset = split_dataset(table, seed=seed)
    for modality in ("text", "visual"):
        dataset.attach_features(modality, rng.normal(size=(n_items, feat_dim)))
    return dataset


@pytest.fixture
def tiny_dataset() -> Dataset:
    return build_random_dataset()
