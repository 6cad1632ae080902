"""
Tests for approximate k-NN graph construction
"""

import numpy as np
import pytest

from hilbertforest.dataset import MISSING_ID, VectorDataset
from hilbertforest.errors import DatasetFormatError, ParameterError, ShapeMismatchError
from hilbertforest.evaluate import brute_force_graph
from hilbertforest.graph import (
    NODE_BLOCK,
    KnnGraph,
    build_graph,
    build_graph_with_stats,
    graph_recall,
    load_graph,
    peak_transient_memory,
    save_graph,
)
from hilbertforest.parallel import set_num_threads
from hilbertforest.params import GraphParams


class TestGraphParams:
    """Test parameter validation."""

    def test_defaults(self):
        params = GraphParams(n=8, k1=96, k2=60)
        assert params.k_out == 15
        assert params.seed == 0
        assert params.exact_final is True

    def test_window_of_one_rejected(self):
        with pytest.raises(ParameterError, match="k1"):
            GraphParams(n=1, k1=1, k2=1)

    def test_negative_seed_rejected(self):
        with pytest.raises(ParameterError, match="seed"):
            GraphParams(n=1, k1=2, k2=1, k_out=1, seed=-1)

    def test_dataset_too_small(self, tiny_dataset):
        with pytest.raises(ParameterError, match="k_out=5"):
            build_graph(tiny_dataset, GraphParams(n=1, k1=10, k2=10, k_out=5))

    def test_narrow_window_accepted(self, small_dataset):
        g = build_graph(small_dataset, GraphParams(n=8, k1=4, k2=20, k_out=15))
        assert (g.count, g.k_out) == (400, 15)
        g.validate()

    def test_single_narrow_pass_pads_rows(self, tmp_path, small_dataset):
        g, stats = build_graph_with_stats(small_dataset, GraphParams(n=1, k1=5, k2=20, k_out=10))
        g.validate()
        assert stats.padded_nodes == small_dataset.count
        assert (g.neighbors[:, :5] >= 0).all()
        assert (g.neighbors[:, 5:] == MISSING_ID).all()
        path = tmp_path / "g.bin"
        save_graph(g, path)
        assert load_graph(path) == g

    def test_survivors_fewer_than_out_degree(self, small_dataset):
        with pytest.raises(ParameterError, match="k2 must be >= k_out"):
            build_graph(small_dataset, GraphParams(n=1, k1=20, k2=5, k_out=10))


class TestKnnGraph:
    """Test graph validation and persistence."""

    def test_valid(self):
        g = KnnGraph(np.array([[1, 2], [2, 0], [0, 1]]))
        g.validate()
        assert (g.count, g.k_out) == (3, 2)

    def test_self_loop(self):
        with pytest.raises(DatasetFormatError, match="Self-loop at node 1"):
            KnnGraph(np.array([[1, 2], [1, 0], [0, 1]])).validate()

    def test_duplicate_neighbor(self):
        with pytest.raises(DatasetFormatError, match="Duplicate neighbor at node 2"):
            KnnGraph(np.array([[1, 2], [2, 0], [1, 1]])).validate()

    def test_out_of_range(self):
        with pytest.raises(DatasetFormatError, match="outside"):
            KnnGraph(np.array([[1], [3]])).validate()

    def test_padding_suffix_accepted(self):
        KnnGraph(np.array([[1, MISSING_ID], [0, MISSING_ID], [0, 1]])).validate()

    def test_padding_gap_rejected(self):
        with pytest.raises(DatasetFormatError, match="Padding precedes a real neighbor at node 1"):
            KnnGraph(np.array([[1, 2], [MISSING_ID, 0], [0, 1]])).validate()

    def test_file_round_trip(self, tmp_path, small_dataset):
        g = build_graph(small_dataset, GraphParams(n=2, k1=20, k2=20, k_out=5))
        path = tmp_path / "g.bin"
        save_graph(g, path)
        assert load_graph(path) == g
        assert len(path.read_bytes()) == 16 + small_dataset.count * 5 * 4

    def test_oversized_count_is_truncation(self, tmp_path):
        path = tmp_path / "g.bin"
        save_graph(KnnGraph(np.array([[1], [0]])), path)
        raw = bytearray(path.read_bytes())
        raw[12:16] = b"\xff" * 4
        path.write_bytes(bytes(raw))
        with pytest.raises(DatasetFormatError, match="Truncated payload"):
            load_graph(path)

    def test_save_refuses_invalid_graph(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            save_graph(KnnGraph(np.array([[0], [0]])), tmp_path / "g.bin")


class TestBuildGraph:
    """Test construction."""

    def test_saturated_equals_brute_force(self):
        """A window and survivor set covering everything reproduce the exact graph."""
        rng = np.random.default_rng(99)
        for trial in range(51):
            d = (2, 16, 64)[trial % 3]
            # every tenth dataset is large
            count = int(rng.integers(1000, 2001)) if trial % 10 == 9 else int(rng.integers(3, 200))
            data = rng.standard_normal((count, d))
            if trial % 5 == 0:
                data = np.round(data)
            ds = VectorDataset(data)
            k_out = min(5, count - 1)
            params = GraphParams(n=1, k1=count - 1, k2=count - 1, k_out=k_out, seed=trial)
            g = build_graph(ds, params)
            assert g == brute_force_graph(ds, k_out)

    def test_rows_are_valid(self, small_dataset):
        g = build_graph(small_dataset, GraphParams(n=3, k1=12, k2=12, k_out=8))
        g.validate()
        assert g.neighbors.shape == (small_dataset.count, 8)

    def test_rows_sorted_by_distance(self, small_dataset):
        g = build_graph(small_dataset, GraphParams(n=4, k1=20, k2=20, k_out=10))
        data = small_dataset.data.astype(np.float64)
        for i in range(0, small_dataset.count, 37):
            d = ((data[g.neighbors[i]] - data[i]) ** 2).sum(axis=1)
            assert (np.diff(d) >= 0).all()

    def test_asymmetric_final(self, small_dataset):
        params = GraphParams(n=4, k1=30, k2=40, k_out=10, exact_final=False)
        g = build_graph(small_dataset, params)
        g.validate()
        assert graph_recall(g, brute_force_graph(small_dataset, 10)) > 0.3

    def test_deterministic(self, small_dataset):
        params = GraphParams(n=3, k1=16, k2=20, k_out=6, seed=11)
        assert build_graph(small_dataset, params) == build_graph(small_dataset, params)

    def test_thread_count_does_not_matter(self, small_dataset):
        params = GraphParams(n=3, k1=16, k2=20, k_out=6, seed=11)
        set_num_threads(1)
        one = build_graph(small_dataset, params)
        set_num_threads(8)
        eight = build_graph(small_dataset, params)
        assert one == eight

    def test_more_passes_help(self, small_dataset):
        truth = brute_force_graph(small_dataset, 10)
        few = graph_recall(build_graph(small_dataset, GraphParams(n=1, k1=20, k2=20, k_out=10)), truth)
        many = graph_recall(build_graph(small_dataset, GraphParams(n=12, k1=20, k2=20, k_out=10)), truth)
        assert many > few


class TestGraphStats:
    """Test construction counters and scratch accounting."""

    def test_counters(self, small_dataset):
        params = GraphParams(n=5, k1=20, k2=25, k_out=10)
        _, stats = build_graph_with_stats(small_dataset, params)
        assert stats.c1_slots_per_node == 5 * 20
        assert stats.full_distance_evals <= small_dataset.count * 25
        assert stats.full_distance_evals >= small_dataset.count * 10
        assert stats.seconds >= 0.0

    def test_scratch_does_not_grow_with_passes(self, rng):
        ds = VectorDataset(rng.random((10_000, 8)))
        _, few = build_graph_with_stats(ds, GraphParams(n=4, k1=20, k2=20, k_out=10))
        _, many = build_graph_with_stats(ds, GraphParams(n=64, k1=20, k2=20, k_out=10))
        assert abs(many.scratch_high_water - few.scratch_high_water) <= 0.05 * few.scratch_high_water

    def test_scratch_matches_analytic_peak(self, rng):
        ds = VectorDataset(rng.random((10_000, 8)))
        assert ds.count > NODE_BLOCK
        params = GraphParams(n=2, k1=20, k2=30, k_out=10)
        _, stats = build_graph_with_stats(ds, params)
        peak = peak_transient_memory(params, ds.count, ds.dim)
        assert stats.scratch_high_water <= peak
        assert stats.scratch_high_water >= 0.95 * peak

    def test_peak_ignores_pass_count(self):
        a = peak_transient_memory(GraphParams(n=1, k1=96, k2=60), 10**6, 384)
        b = peak_transient_memory(GraphParams(n=720, k1=96, k2=60), 10**6, 384)
        assert a == b


class TestGraphRecall:
    """Test graph scoring."""

    def test_identical(self):
        g = KnnGraph(np.array([[1, 2], [2, 0], [0, 1]]))
        assert graph_recall(g, g) == 1.0

    def test_partial(self):
        g = KnnGraph(np.array([[1, 2], [2, 0], [0, 1]]))
        truth = KnnGraph(np.array([[1, 3], [2, 3], [0, 1]]))
        assert graph_recall(g, truth) == pytest.approx((0.5 + 0.5 + 1.0) / 3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            graph_recall(KnnGraph(np.zeros((3, 2), dtype=np.int64)), KnnGraph(np.zeros((3, 1), dtype=np.int64)))


@pytest.mark.slow
def test_graph_recall_at_scale():
    """recall@15 >= 0.8 on 10^5 clustered points for at least four of five seeds."""
    from hilbertforest.evaluate import synth_dataset

    passed = 0
    for seed in range(5):
        ds = synth_dataset(100_000, 64, "gaussian-mixture", seed=seed, clusters=2000)
        g = build_graph(ds, GraphParams(n=16, k1=96, k2=60, k_out=15, seed=seed))
        passed += graph_recall(g, brute_force_graph(ds, 15)) >= 0.8
    assert passed >= 4


@pytest.mark.slow
def test_recall_grows_across_tiers():
    """Mean recall over three seeds never drops by more than 0.02 from one tier to the next."""
    from hilbertforest.evaluate import scale_graph_tiers, synth_dataset

    tiers = scale_graph_tiers(100_000)
    recalls = np.zeros(len(tiers))
    for seed in range(3):
        ds = synth_dataset(100_000, 64, "gaussian-mixture", seed=seed, clusters=2000)
        truth = brute_force_graph(ds, 15)
        recalls += [graph_recall(build_graph(ds, params), truth) for params in tiers]
    recalls /= 3
    assert recalls[-1] > recalls[0]
    assert all(b >= a - 0.02 for a, b in zip(recalls, recalls[1:]))
