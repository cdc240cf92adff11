"""Tests for interaction loading, filtering, splitting, and popularity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmgraphrec.data import (Dataset, InteractionTable, TEST, TRAIN, VALID,
                             compute_popularity, k_core_filter,
                             load_dataset_dir, load_interactions,
                             save_dataset_dir, split_dataset)
from mmgraphrec.errors import (ConfigError, EmptyDataError, FormatError,
                               SplitError)


def write_tsv(tmp_path, rows, name="inter.tsv"):
    path = tmp_path / name
    path.write_text("".join(rows), encoding="utf-8")
    return path


class TestLoadInteractions:
    def test_two_users_one_item(self, tmp_path):
        path = write_tsv(tmp_path, ["a\tx\n", "b\tx\n"])
        table = load_interactions(path)
        assert (table.user_count, table.item_count, table.n_edges) == (2, 1, 2)

    def test_duplicates_collapse(self, tmp_path):
        path = write_tsv(tmp_path, ["a\tx\n", "a\tx\n"])
        table = load_interactions(path)
        assert table.n_edges == 1

    def test_extra_columns_ignored(self, tmp_path):
        path = write_tsv(tmp_path, ["a\tx\t5.0\t2019\n"])
        table = load_interactions(path)
        assert table.n_edges == 1

    def test_header_detected(self, tmp_path):
        path = write_tsv(tmp_path, ["user_id\titem_id\n", "a\tx\n"])
        table = load_interactions(path)
        assert table.user_count == 1 and table.user_ids == ["a"]

    def test_header_forced_off(self, tmp_path):
        path = write_tsv(tmp_path, ["user_id\titem_id\n", "a\tx\n"])
        table = load_interactions(path, has_header=False)
        assert table.user_count == 2

    def test_bad_row_names_line(self, tmp_path):
        path = write_tsv(tmp_path, ["a\tx\n", "only-one-column\n"])
        with pytest.raises(FormatError, match=":2"):
            load_interactions(path)

    def test_empty_file(self, tmp_path):
        path = write_tsv(tmp_path, [])
        with pytest.raises(EmptyDataError):
            load_interactions(path)

    def test_mapping_is_first_appearance_order(self, tmp_path):
        path = write_tsv(tmp_path, ["b\ty\n", "a\ty\n", "b\tx\n"])
        table = load_interactions(path)
        assert table.user_ids == ["b", "a"]
        assert table.item_ids == ["y", "x"]


def brute_force_k_core(edges, k):
    """Repeated-scan peeling oracle over raw (user, item) tuples."""
    edges = set(edges)
    while True:
        users = {}
        items = {}
        for u, i in edges:
            users[u] = users.get(u, 0) + 1
            items[i] = items.get(i, 0) + 1
        bad_u = {u for u, c in users.items() if c < k}
        bad_i = {i for i, c in items.items() if c < k}
        if not bad_u and not bad_i:
            return edges
        edges = {(u, i) for u, i in edges if u not in bad_u and i not in bad_i}
        if not edges:
            return edges


def as_named_table(edges, n_users, n_items):
    return InteractionTable(
        n_users, n_items, np.asarray(sorted(edges), dtype=np.int64),
        user_ids=[f"u{j}" for j in range(n_users)],
        item_ids=[f"i{j}" for j in range(n_items)])


class TestKCore:
    def test_fixed_point_when_already_dense(self):
        edges = [(u, i) for u in range(4) for i in range(4)]
        table = as_named_table(edges, 4, 4)
        out = k_core_filter(table, 3)
        assert np.array_equal(out.edges, table.edges)

    def test_star_graph_empties(self):
        edges = [(0, i) for i in range(5)]
        table = as_named_table(edges, 1, 5)
        with pytest.raises(EmptyDataError):
            k_core_filter(table, 2)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        edges = {(int(u), int(i)) for u, i in
                 zip(rng.integers(0, 12, 80), rng.integers(0, 15, 80))}
        table = as_named_table(edges, 12, 15)
        once = k_core_filter(table, 3)
        twice = k_core_filter(once, 3)
        assert np.array_equal(once.edges, twice.edges)
        assert once.user_ids == twice.user_ids

    def test_invalid_k(self):
        table = as_named_table([(0, 0)], 1, 1)
        with pytest.raises(ConfigError):
            k_core_filter(table, 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_peeling_oracle(self, seed):
        rng = np.random.default_rng(seed)
        edges = {(int(u), int(i)) for u, i in
                 zip(rng.integers(0, 20, 150), rng.integers(0, 25, 150))}
        table = as_named_table(edges, 20, 25)
        expected = brute_force_k_core(edges, 3)
        out = k_core_filter(table, 3)
        # map filtered dense indices back through the retained id lists
        got = {(int(out.user_ids[u][1:]), int(out.item_ids[i][1:]))
               for u, i in out.edges}
        assert got == expected

    @given(st.sets(st.tuples(st.integers(0, 7), st.integers(0, 7)),
                   min_size=10, max_size=40).filter(
        lambda edges: bool(brute_force_k_core(edges, 2))))
    @settings(max_examples=40, deadline=None)
    def test_permutation_invariance(self, edges):
        n_users = max(u for u, _ in edges) + 1
        n_items = max(i for _, i in edges) + 1
        base = k_core_filter(as_named_table(edges, n_users, n_items), 2)
        shuffled = list(edges)
        np.random.default_rng(0).shuffle(shuffled)
        table = InteractionTable(
            n_users, n_items, np.asarray(shuffled, dtype=np.int64),
            user_ids=[f"u{j}" for j in range(n_users)],
            item_ids=[f"i{j}" for j in range(n_items)])
        other = k_core_filter(table, 2)
        assert np.array_equal(base.edges, other.edges)
        assert base.user_ids == other.user_ids


def table_with_degrees(degrees):
    """One user per entry, interacting with the first `deg` items."""
    n_items = max(degrees)
    edges = [(u, i) for u, deg in enumerate(degrees) for i in range(deg)]
    return as_named_table(edges, len(degrees), n_items)


class TestSplit:
    def test_ratio_allocation_ten_edges(self):
        dataset = split_dataset(table_with_degrees([10]), seed=1)
        counts = np.bincount(dataset.split, minlength=3)
        assert counts[TRAIN] == 8 and counts[VALID] == 1 and counts[TEST] == 1

    def test_minimum_one_for_small_users(self):
        dataset = split_dataset(table_with_degrees([5]), seed=1)
        counts = np.bincount(dataset.split, minlength=3)
        assert counts[TRAIN] == 3 and counts[VALID] == 1 and counts[TEST] == 1

    def test_three_edges_is_smallest_user(self):
        dataset = split_dataset(table_with_degrees([3]), seed=1)
        counts = np.bincount(dataset.split, minlength=3)
        assert counts.tolist() == [1, 1, 1]

    def test_user_below_three_rejected(self):
        with pytest.raises(SplitError, match="u1"):
            split_dataset(table_with_degrees([5, 2]), seed=1)

    def test_bad_ratios_rejected(self):
        with pytest.raises(ConfigError):
            split_dataset(table_with_degrees([5]), ratios=(0.6, 0.3, 0.3), seed=1)

    def test_deterministic_given_seed(self):
        table = table_with_degrees([10, 7, 5, 9])
        a = split_dataset(table, seed=42)
        b = split_dataset(table, seed=42)
        assert np.array_equal(a.split, b.split)
        c = split_dataset(table, seed=43)
        assert not np.array_equal(a.split, c.split)

    @given(st.lists(st.integers(3, 15), min_size=1, max_size=12),
           st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_partition_is_exact(self, degrees, seed):
        table = table_with_degrees(degrees)
        dataset = split_dataset(table, seed=seed)
        assert len(dataset.split) == table.n_edges
        assert set(np.unique(dataset.split)) <= {TRAIN, VALID, TEST}
        # every user keeps at least one edge per part
        for u, deg in enumerate(degrees):
            rows = dataset.split[table.edges[:, 0] == u]
            assert (rows == TRAIN).sum() >= 1
            assert (rows == VALID).sum() >= 1
            assert (rows == TEST).sum() >= 1

    def test_item_pop_sums_to_train_edges(self):
        dataset = split_dataset(table_with_degrees([10, 7, 5, 9]), seed=3)
        assert dataset.item_pop.sum() == (dataset.split == TRAIN).sum()


class TestPopularity:
    def test_values(self):
        # one item with 9 training edges: ln(10); unseen item: 0
        edges = [(u, 0) for u in range(9)] + [(u, 1) for u in range(9)] \
            + [(u, 2) for u in range(9)]
        table = as_named_table(edges, 9, 3)
        dataset = Dataset(interactions=table,
                          split=np.zeros(table.n_edges, dtype=np.int8),
                          item_pop=np.array([9, 0, 1]))
        pop = compute_popularity(dataset)
        np.testing.assert_allclose(pop[0], 2.302585, atol=1e-6)
        assert pop[1] == 0.0
        np.testing.assert_allclose(pop[2], np.log(2.0), rtol=1e-12)


class TestDatasetDir:
    def test_round_trip(self, tmp_path, tiny_dataset):
        save_dataset_dir(tiny_dataset, tmp_path / "d")
        loaded = load_dataset_dir(tmp_path / "d")
        assert np.array_equal(loaded.interactions.edges, tiny_dataset.interactions.edges)
        assert np.array_equal(loaded.split, tiny_dataset.split)
        assert np.array_equal(loaded.item_pop, tiny_dataset.item_pop)
        assert loaded.interactions.user_ids == tiny_dataset.interactions.user_ids

    def test_rewrite_is_byte_identical(self, tmp_path, tiny_dataset):
        save_dataset_dir(tiny_dataset, tmp_path / "a")
        save_dataset_dir(tiny_dataset, tmp_path / "b")
        for name in ("splits.tsv", "user_map.tsv", "item_map.tsv", "item_pop.tsv"):
            assert (tmp_path / "a" / name).read_bytes() == \
                   (tmp_path / "b" / name).read_bytes()
