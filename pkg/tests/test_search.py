"""
Tests for index construction and the three-stage search
"""

import numpy as np
import pytest

from hilbertforest.codes import quantize_batch
from hilbertforest.curve import hilbert_sort, position_search
from hilbertforest.dataset import MISSING_ID, VectorDataset
from hilbertforest.errors import DatasetFormatError, DimensionMismatchError, ParameterError
from hilbertforest.evaluate import brute_force_knn, recall_at_k
from hilbertforest.parallel import set_num_threads
from hilbertforest.params import SearchParams
from hilbertforest.search import (
    build_index,
    build_index_with_stats,
    collect_candidates,
    count_distance_evals,
    expand_master,
    load_index,
    save_index,
    search,
    search_with_stats,
)
from hilbertforest.tree import extract_candidates


def exhaustive(count, k=10, n=1):
    return SearchParams(n=n, k1=count, k2=count, h=0, k=min(k, count), exact_final=True)


class TestSearchParams:
    """Test parameter validation."""

    def test_defaults(self):
        params = SearchParams(n=4, k1=10, k2=5)
        assert params.h == 0
        assert params.k == 30
        assert params.exact_final is False

    @pytest.mark.parametrize("field", ["n", "k1", "k2", "k"])
    def test_zero_rejected(self, field):
        values = dict(n=1, k1=1, k2=1, k=1)
        values[field] = 0
        with pytest.raises(ParameterError, match=field):
            SearchParams(**values)

    def test_negative_h_rejected(self):
        with pytest.raises(ParameterError, match="h must be >= 0"):
            SearchParams(n=1, k1=1, k2=1, h=-1)

    def test_budgets(self):
        params = SearchParams(n=160, k1=1420, k2=370, h=2)
        assert params.hamming_budget == 227_200
        assert params.distance_budget == 1850


class TestBuildIndex:
    """Test preprocessing."""

    def test_master_order_is_first_tree(self, rng):
        ds = VectorDataset(rng.random((10, 3)))
        index = build_index(ds, 1, leaf_size=4)
        np.testing.assert_array_equal(index.master.perm, index.forest[0].perm)
        np.testing.assert_array_equal(index.master.perm[index.master.inverse], np.arange(10))

    def test_codes_stored_in_master_order(self, small_dataset):
        index = build_index(small_dataset, 2, leaf_size=20)
        first = index.master.perm[0]
        expected = quantize_batch(small_dataset.data[[first]], index.quantizer)
        np.testing.assert_array_equal(index.codes.codes_of([first]), expected)
        np.testing.assert_array_equal(index.codes.perm, index.master.perm)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ParameterError, match="empty"):
            build_index(VectorDataset(np.zeros(0), dim=2), 1)

    def test_build_stats(self, small_dataset):
        index, stats = build_index_with_stats(small_dataset, 3, leaf_size=20, seed=4)
        assert index.forest == build_index(small_dataset, 3, leaf_size=20, seed=4).forest
        stages = [stats.quantizer_seconds, stats.forest_seconds, stats.master_seconds, stats.codes_seconds]
        assert min(stages) >= 0.0
        assert stats.seconds == pytest.approx(sum(stages))
        assert stats.forest_bytes == index.forest.nbytes
        assert stats.code_bytes == small_dataset.count * small_dataset.dim // 2
        assert set(stats.counters()) >= {"forest_seconds", "codes_seconds", "forest_bytes"}

    def test_serialized_index_is_deterministic(self, tmp_path, small_dataset):
        a, b = tmp_path / "a.idx", tmp_path / "b.idx"
        save_index(build_index(small_dataset, 3, leaf_size=20, seed=4), a)
        save_index(build_index(small_dataset, 3, leaf_size=20, seed=4), b)
        assert a.read_bytes() == b.read_bytes()

    def test_round_trip_gives_same_results(self, tmp_path, small_dataset, small_queries):
        index = build_index(small_dataset, 3, leaf_size=20, seed=4)
        path = tmp_path / "a.idx"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded.forest == index.forest
        assert loaded.codes == index.codes
        params = SearchParams(n=3, k1=20, k2=30, h=1, k=10)
        assert search(loaded, small_queries, params) == search(index, small_queries, params)

    def test_oversized_dataset_count_is_truncation(self, tmp_path, small_dataset):
        path = tmp_path / "a.idx"
        save_index(build_index(small_dataset, 1), path)
        raw = bytearray(path.read_bytes())
        # embedded vector header follows the index header and its 12-byte metadata
        raw[40:44] = b"\xff" * 4
        path.write_bytes(bytes(raw))
        with pytest.raises(DatasetFormatError, match="Truncated payload"):
            load_index(path)


class TestCollectCandidates:
    """Test the forest stage."""

    def test_slot_count(self, small_dataset, small_queries):
        index = build_index(small_dataset, 4, leaf_size=20)
        c1 = collect_candidates(index, small_queries, 3, 25)
        assert c1.shape == (small_queries.count, 75)

    def test_saturation_covers_everything(self, small_dataset, small_queries):
        index = build_index(small_dataset, 2, leaf_size=20)
        c1 = collect_candidates(index, small_queries, 1, small_dataset.count)
        for row in c1:
            assert np.array_equal(np.unique(row), np.arange(small_dataset.count))

    def test_matches_per_tree_windows(self, rng):
        ds = VectorDataset(rng.random((100, 4)))
        index = build_index(ds, 2, leaf_size=10, seed=8)
        q = rng.random(4)
        c1 = collect_candidates(index, VectorDataset(q[None, :]), 2, 7)[0]
        expected = []
        for tree in index.forest.trees:
            order = hilbert_sort(ds, tree.cfg, tree.bounds)
            pos = position_search(order, ds, q, tree.bounds, tree.cfg)
            expected.extend(extract_candidates(tree, pos, 7).tolist())
        assert c1.tolist() == expected

    def test_too_many_trees(self, small_dataset, small_queries):
        index = build_index(small_dataset, 2)
        with pytest.raises(ParameterError, match="n must be"):
            collect_candidates(index, small_queries, 3, 5)


class TestExpandMaster:
    """Test master-order expansion."""

    def test_h_zero_is_identity(self, small_dataset):
        index = build_index(small_dataset, 1)
        np.testing.assert_array_equal(expand_master(index, [9, 3, 3, 7], 0), [3, 7, 9])

    def test_clamped_at_start(self, small_dataset):
        index = build_index(small_dataset, 1)
        got = expand_master(index, [index.master.perm[0]], 3)
        np.testing.assert_array_equal(got, np.sort(index.master.perm[:4]))

    def test_interior(self, small_dataset):
        index = build_index(small_dataset, 1)
        got = expand_master(index, [index.master.perm[50]], 2)
        np.testing.assert_array_equal(got, np.sort(index.master.perm[48:53]))


class TestSearch:
    """Test end-to-end search."""

    def test_exhaustive_equals_brute_force(self):
        """Saturated parameters reproduce exact k-NN, order and ties included."""
        rng = np.random.default_rng(2024)
        for trial in range(51):
            d = (2, 16, 64)[trial % 3]
            count = int(rng.integers(1, 300))
            data = rng.standard_normal((count, d))
            if trial % 4 == 0:
                data = np.round(data)
            ds = VectorDataset(data)
            queries = VectorDataset(rng.standard_normal((7, d)))
            index = build_index(ds, 1, leaf_size=int(rng.integers(1, 50)), seed=trial)
            params = exhaustive(count)
            assert search(index, queries, params) == brute_force_knn(ds, queries, params.k)

    def test_self_query_comes_first(self, rng):
        ds = VectorDataset(rng.standard_normal((120, 8)))
        index = build_index(ds, 2, leaf_size=10)
        rs = search(index, ds.take([17, 99]), exhaustive(120, n=2))
        assert rs.ids[0, 0] == 17
        assert rs.ids[1, 0] == 99

    def test_small_pool_is_padded(self, small_dataset, small_queries):
        index = build_index(small_dataset, 1, leaf_size=20)
        rs = search(index, small_queries, SearchParams(n=1, k1=2, k2=2, h=0, k=10))
        assert rs.k == 10
        assert (rs.ids[:, 2:] == MISSING_ID).all()
        assert (rs.ids[:, :2] >= 0).all()
        rs.validate(small_dataset.count)

    def test_width_capped_at_dataset_size(self, tiny_dataset):
        index = build_index(tiny_dataset, 1)
        rs = search(index, tiny_dataset, SearchParams(n=1, k1=5, k2=5, k=30, exact_final=True))
        assert rs.k == 5

    def test_asymmetric_mode(self, small_dataset, small_queries):
        index = build_index(small_dataset, 4, leaf_size=20)
        rs = search(index, small_queries, SearchParams(n=4, k1=60, k2=80, h=1, k=10))
        rs.validate(small_dataset.count)
        truth = brute_force_knn(small_dataset, small_queries, 10)
        assert recall_at_k(rs, truth, 10) > 0.3

    def test_dimension_mismatch(self, small_dataset):
        index = build_index(small_dataset, 1)
        with pytest.raises(DimensionMismatchError):
            search(index, VectorDataset(np.zeros((1, 3))), SearchParams(n=1, k1=1, k2=1))

    def test_more_trees_than_built(self, small_dataset, small_queries):
        index = build_index(small_dataset, 2)
        with pytest.raises(ParameterError, match="forest size"):
            search(index, small_queries, SearchParams(n=3, k1=1, k2=1))

    def test_thread_count_does_not_matter(self, small_dataset, small_queries):
        index = build_index(small_dataset, 3, leaf_size=20)
        params = SearchParams(n=3, k1=30, k2=40, h=2, k=15)
        set_num_threads(1)
        one = search(index, small_queries, params)
        set_num_threads(8)
        eight = search(index, small_queries, params)
        assert one == eight

    def test_more_trees_never_lose_candidates(self, small_dataset, small_queries):
        index = build_index(small_dataset, 6, leaf_size=20)
        few = collect_candidates(index, small_queries, 2, 20)
        many = collect_candidates(index, small_queries, 6, 20)
        for a, b in zip(few, many):
            assert set(a.tolist()) <= set(b.tolist())

    def test_recall_holds_as_trees_double(self):
        """Mean recall over five seeds never drops by more than 0.02 when n doubles."""
        from hilbertforest.evaluate import synth_dataset

        tree_counts = (2, 4, 8)
        recalls = np.zeros(len(tree_counts))
        for seed in range(5):
            full = synth_dataset(2100, 16, "gaussian-mixture", seed=seed, clusters=20)
            ds, queries = full.take(range(2000)), full.take(range(2000, 2100))
            truth = brute_force_knn(ds, queries, 10)
            index = build_index(ds, 8, leaf_size=50, seed=seed)
            for j, n in enumerate(tree_counts):
                params = SearchParams(n=n, k1=20, k2=120, h=1, k=10, exact_final=True)
                recalls[j] += recall_at_k(search(index, queries, params), truth, 10)
        recalls /= 5
        assert all(b >= a - 0.02 for a, b in zip(recalls, recalls[1:]))


class TestCounters:
    """Test per-stage evaluation counters."""

    def test_exhaustive_counts_every_point(self, rng):
        ds = VectorDataset(rng.standard_normal((100, 4)))
        index = build_index(ds, 1, leaf_size=10)
        _, stats = search_with_stats(index, VectorDataset(rng.standard_normal((5, 4))), exhaustive(100))
        assert (stats.full_distance_evals == 100).all()
        assert count_distance_evals(stats)["full_distance"]["max"] == 100

    def test_budgets_hold(self, small_dataset, small_queries):
        index = build_index(small_dataset, 8, leaf_size=20)
        params = SearchParams(n=8, k1=50, k2=20, h=2)
        _, stats = search_with_stats(index, small_queries, params)
        assert (stats.c1_slots == 400).all()
        assert (stats.hamming_evals <= params.hamming_budget).all()
        assert (stats.c2_size <= 20).all()
        assert (stats.full_distance_evals <= params.distance_budget).all()

    def test_counters_repeat(self, small_dataset, small_queries):
        index = build_index(small_dataset, 3, leaf_size=20)
        params = SearchParams(n=3, k1=25, k2=30, h=1)
        _, a = search_with_stats(index, small_queries, params)
        _, b = search_with_stats(index, small_queries, params)
        summary_a, summary_b = count_distance_evals(a), count_distance_evals(b)
        assert summary_a == summary_b
        assert summary_a["c1_slots"]["total"] == 75 * small_queries.count


@pytest.mark.slow
def test_recall_threshold_at_scale():
    """recall@30 >= 0.7 on 10^5 clustered points with a small distance budget."""
    from hilbertforest.evaluate import synth_dataset

    passed = 0
    for seed in range(5):
        full = synth_dataset(101_000, 64, "gaussian-mixture", seed=seed, clusters=2000)
        ds, queries = full.take(range(100_000)), full.take(range(100_000, 101_000))
        index = build_index(ds, 8, seed=seed)
        params = SearchParams(n=8, k1=256, k2=200, h=2, k=30)
        assert params.distance_budget <= 0.05 * ds.count
        rs, stats = search_with_stats(index, queries, params)
        assert (stats.full_distance_evals <= params.distance_budget).all()
        if recall_at_k(rs, brute_force_knn(ds, queries, 30), 30) >= 0.7:
            passed += 1
    assert passed >= 4
