"""
Approximate k-NN graph construction from successive Hilbert sorts

Every point is its own query, so no tree is needed: each pass sorts all points
along a freshly permuted curve and hands every point the ``k1`` points nearest
to it in that order. Per point, the ``k2`` distinct candidates closest in
sketch Hamming distance are carried from pass to pass, and the sorted order of
a pass is dropped before the next begins, so memory does not grow with the
number of passes. The survivors are finally ranked by vector distance.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Tuple, Union

import numpy as np

from . import binfmt
from .codes import POPCOUNT, SKETCH_MASK, asymmetric_distances, build_code_table, fit_quantizer
from .curve import DEFAULT_BITS_PER_AXIS, compute_bounds, derive_curve_config, hilbert_sort
from .dataset import MISSING_ID, VectorDataset, mean_overlap
from .distance import rank_by_distance, squared_l2
from .errors import DatasetFormatError, ParameterError, ShapeMismatchError
from .parallel import parallel_map
from .params import GraphParams
from .tree import window_starts

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

#: Points whose candidates are merged together in one block.
NODE_BLOCK = 2048

_EMPTY = np.iinfo(np.int64).max


class KnnGraph:
    """
    Directed k-NN graph: row ``i`` lists the ``k_out`` neighbors of point ``i``
    sorted by (distance, id). A node that was offered fewer than ``k_out``
    candidates ends its row in ``MISSING_ID`` padding.
    """

    def __init__(self, neighbors: np.ndarray):
        neighbors = np.ascontiguousarray(neighbors, dtype=np.int64)
        if neighbors.ndim != 2 or neighbors.shape[1] < 1:
            raise DatasetFormatError(f"Graph rows must be two-dimensional, got shape {neighbors.shape}")
        neighbors.setflags(write=False)
        self.neighbors = neighbors

    @property
    def count(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k_out(self) -> int:
        return self.neighbors.shape[1]

    def validate(self) -> None:
        """
        Raises:
            DatasetFormatError: On invalid ids, self-loops, duplicate neighbors
                or padding followed by a real id
        """
        nb = self.neighbors
        if nb.size == 0:
            return
        missing = nb == MISSING_ID
        if (missing[:, :-1] & ~missing[:, 1:]).any():
            node = int(np.nonzero((missing[:, :-1] & ~missing[:, 1:]).any(axis=1))[0][0])
            raise DatasetFormatError(f"Padding precedes a real neighbor at node {node}")
        real = nb[~missing]
        if real.size and (real.min() < 0 or real.max() >= self.count):
            raise DatasetFormatError(f"Graph holds ids outside [0, {self.count})")
        if (nb == np.arange(self.count)[:, None]).any():
            node = int(np.nonzero((nb == np.arange(self.count)[:, None]).any(axis=1))[0][0])
            raise DatasetFormatError(f"Self-loop at node {node}")
        ordered = np.sort(np.where(missing, _EMPTY, nb), axis=1)
        dup = (ordered[:, 1:] == ordered[:, :-1]) & (ordered[:, 1:] != _EMPTY)
        if dup.any():
            node = int(np.nonzero(dup.any(axis=1))[0][0])
            raise DatasetFormatError(f"Duplicate neighbor at node {node}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnnGraph):
            return NotImplemented
        return self.neighbors.shape == other.neighbors.shape and bool(
            np.array_equal(self.neighbors, other.neighbors)
        )

    def __repr__(self) -> str:
        return f"KnnGraph(count={self.count}, k_out={self.k_out})"


@dataclass
class GraphBuildStats:
    """
    Counters of one construction.

    Attributes:
        c1_slots_per_node: Window candidates handed to each point over all passes
        scratch_high_water: Largest per-pass scratch footprint in bytes
            (permutation, inverse and keys of the pass plus one block's window
            and merge buffers)
        full_distance_evals: Vector distances computed in the final stage
        padded_nodes: Nodes left with fewer than ``k_out`` candidates
        seconds: Wall-clock time
    """

    c1_slots_per_node: int = 0
    scratch_high_water: int = 0
    full_distance_evals: int = 0
    padded_nodes: int = 0
    seconds: float = 0.0


def _check(ds: VectorDataset, params: GraphParams) -> None:
    params.validate()
    if ds.count <= params.k_out:
        raise ParameterError(
            f"Dataset of {ds.count} points cannot give each point k_out={params.k_out} neighbors"
        )
    if params.k2 < params.k_out:
        raise ParameterError(f"k2 must be >= k_out={params.k_out}, got {params.k2}")


def _window(count: int, k1: int) -> Tuple[int, np.ndarray]:
    """Window width including the point itself and the offsets within it."""
    w = min(k1 + 1, count)
    return w, np.arange(w, dtype=np.int64)


def peak_transient_memory(
    params: GraphParams, count: int, dim: int, bits_per_axis: int = DEFAULT_BITS_PER_AXIS
) -> int:
    """
    Bytes of per-pass scratch: the pass's permutation, inverse and sorted keys,
    plus one block's window and merge buffers. Independent of ``params.n``.
    """
    if count == 0:
        return 0
    key_bytes = (dim * bits_per_axis + 7) // 8
    w = min(params.k1 + 1, count)
    block = min(NODE_BLOCK, count)
    order_bytes = count * (8 + 8 + key_bytes)
    block_bytes = block * 8 * (w + 4 * (w - 1) + params.k2)
    return order_bytes + block_bytes


def _merge_block(
    window_ids: np.ndarray,
    nodes: np.ndarray,
    best: np.ndarray,
    packed: np.ndarray,
    count: int,
    k2: int,
) -> Tuple[np.ndarray, int]:
    """
    Fold one pass's window candidates of ``nodes`` into their running best.

    ``best`` holds composite keys ``hamming * (count + 1) + id`` (``_EMPTY``
    for unused slots); ordering by the key orders by (hamming, id).
    """
    not_self = window_ids != nodes[:, None]
    cands = window_ids[not_self].reshape(nodes.shape[0], -1)
    ham = POPCOUNT[(packed[cands] ^ packed[nodes][:, None, :]) & SKETCH_MASK].sum(axis=2)
    keys = ham.astype(np.int64) * (count + 1) + cands
    merged = np.sort(np.concatenate([best, keys], axis=1), axis=1)
    dup = np.zeros_like(merged, dtype=bool)
    dup[:, 1:] = merged[:, 1:] == merged[:, :-1]
    merged[dup] = _EMPTY
    merged.sort(axis=1)
    scratch = window_ids.nbytes + cands.nbytes + ham.nbytes + keys.nbytes + merged.nbytes
    return merged[:, :k2], scratch


def build_graph_with_stats(
    ds: VectorDataset, params: GraphParams, bits_per_axis: int = DEFAULT_BITS_PER_AXIS
) -> Tuple[KnnGraph, GraphBuildStats]:
    """
    Build the approximate k-NN graph and report its counters.

    Args:
        ds: Dataset with more than ``k_out`` points
        params: Passes, window, sketch survivors, out-degree, seed
        bits_per_axis: Grid resolution of every curve

    Returns:
        (KnnGraph, GraphBuildStats)
    """
    _check(ds, params)
    start = time.perf_counter()
    N = ds.count
    quantizer = fit_quantizer(ds)
    table = build_code_table(ds, quantizer)
    packed = table.packed
    bounds = compute_bounds(ds)
    w, offsets = _window(N, params.k1)
    best = np.full((N, params.k2), _EMPTY, dtype=np.int64)
    stats = GraphBuildStats()
    blocks = [(lo, min(lo + NODE_BLOCK, N)) for lo in range(0, N, NODE_BLOCK)]

    for t in range(params.n):
        cfg = derive_curve_config(ds.dim, bits_per_axis, params.seed, t)
        order = hilbert_sort(ds, cfg, bounds)
        perm = order.perm
        order_bytes = perm.nbytes + order.inverse.nbytes + order.keys.nbytes
        starts = window_starts(np.arange(N, dtype=np.int64), w, N)

        def merge(span, perm=perm, starts=starts):
            lo, hi = span
            nodes = perm[lo:hi]
            window_ids = perm[starts[lo:hi, None] + offsets]
            return _merge_block(window_ids, nodes, best[nodes], packed, N, params.k2)

        results = parallel_map(merge, blocks)
        block_peak = 0
        for (lo, hi), (merged, scratch) in zip(blocks, results):
            best[perm[lo:hi]] = merged
            block_peak = max(block_peak, scratch)
        stats.scratch_high_water = max(stats.scratch_high_water, order_bytes + block_peak)
        del order, results
        logger.debug("Graph pass %d/%d done", t + 1, params.n)

    stats.c1_slots_per_node = params.n * (w - 1)
    neighbors, evals = _final_selection(ds, best, params, quantizer, table)
    stats.full_distance_evals = evals
    stats.padded_nodes = int((neighbors[:, -1] == MISSING_ID).sum())
    if stats.padded_nodes:
        logger.warning(
            "%d of %d nodes received fewer than k_out=%d candidates; their rows are padded",
            stats.padded_nodes,
            N,
            params.k_out,
        )
    stats.seconds = time.perf_counter() - start
    logger.info(
        "Built %d-NN graph over %d points with %d sorts in %.2fs",
        params.k_out,
        N,
        params.n,
        stats.seconds,
    )
    return KnnGraph(neighbors), stats


def _final_selection(ds, best, params, quantizer, table) -> Tuple[np.ndarray, int]:
    N = ds.count

    def finish(span):
        lo, hi = span
        rows = np.full((hi - lo, params.k_out), MISSING_ID, dtype=np.int64)
        evals = 0
        for i in range(lo, hi):
            keys = best[i]
            cands = keys[keys != _EMPTY] % (N + 1)
            if params.exact_final:
                dists = squared_l2(ds.data[cands], ds.data[i])
            else:
                dists = asymmetric_distances(ds.data[i], table.codes_of(cands), quantizer)
            ranked = rank_by_distance(cands, dists, params.k_out)
            rows[i - lo, : ranked.shape[0]] = ranked
            evals += cands.shape[0]
        return rows, evals

    blocks = [(lo, min(lo + NODE_BLOCK, N)) for lo in range(0, N, NODE_BLOCK)]
    parts = parallel_map(finish, blocks)
    neighbors = np.concatenate([rows for rows, _ in parts], axis=0)
    return neighbors, sum(e for _, e in parts)


def build_graph(ds: VectorDataset, params: GraphParams) -> KnnGraph:
    """Approximate k-NN graph; see :func:`build_graph_with_stats`."""
    return build_graph_with_stats(ds, params)[0]


def graph_recall(g: KnnGraph, truth: KnnGraph) -> float:
    """
    Mean over nodes of the fraction of true neighbors present in ``g``.

    Raises:
        ShapeMismatchError: If count or k_out differ
    """
    if g.neighbors.shape != truth.neighbors.shape:
        raise ShapeMismatchError(
            f"Graph shapes differ: {g.neighbors.shape} vs {truth.neighbors.shape}"
        )
    return mean_overlap(g.neighbors, truth.neighbors, g.k_out)


def write_graph(fh: BinaryIO, g: KnnGraph) -> None:
    binfmt.write_header(fh, binfmt.MAGIC_GRAPH, g.k_out, g.count)
    stored = np.where(g.neighbors == MISSING_ID, binfmt.UINT32_MAX, g.neighbors)
    binfmt.write_array(fh, stored, "<u4")


def read_graph(fh: BinaryIO, source: str = "<stream>") -> KnnGraph:
    k_out, count = binfmt.read_header(fh, binfmt.MAGIC_GRAPH, source)
    if k_out < 1:
        raise DatasetFormatError(f"Malformed header in {source}: k_out must be positive")
    ids = binfmt.read_array(fh, "<u4", k_out * count, source).astype(np.int64)
    ids[ids == binfmt.UINT32_MAX] = MISSING_ID
    g = KnnGraph(ids.reshape(count, k_out))
    g.validate()
    return g


def save_graph(g: KnnGraph, path: PathLike) -> None:
    """Persist a graph: header (count, k_out) and row-major 32-bit ids."""
    g.validate()
    with Path(path).open("wb") as fh:
        write_graph(fh, g)


def load_graph(path: PathLike) -> KnnGraph:
    """Load a graph written by :func:`save_graph`."""
    path = Path(path)
    with path.open("rb") as fh:
        g = read_graph(fh, str(path))
        binfmt.expect_eof(fh, str(path))
    return g
