"""
Approximate k-NN search over a Hilbert forest

Preprocessing quantizes the dataset, picks tree 0's Hilbert order as the
master order, stores the 4-bit codes (and with them the sketches) in master
order, and keeps the forest. A search then runs three stages per query:

1. every tree contributes the ``k1`` ids nearest to the query's position in
   its order (``n * k1`` slots, duplicates included),
2. the ``k2`` distinct candidates of smallest sketch Hamming distance survive,
3. each survivor is widened by ``h`` master-order neighbors on each side and
   the pool is re-ranked by vector distance.
"""

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Tuple, Union

import numpy as np

from . import binfmt
from .codes import (
    CodeTable,
    QuantizerParams,
    asymmetric_distances,
    build_code_table,
    fit_quantizer,
    quantize,
    read_code_table,
    sketch_of,
    sketch_topk,
    write_code_table,
)
from .curve import DEFAULT_BITS_PER_AXIS, GridBounds
from .dataset import MISSING_ID, ResultSet, VectorDataset, read_vectors, write_vectors
from .distance import rank_by_distance, squared_l2
from .errors import DatasetFormatError, DimensionMismatchError, ParameterError
from .parallel import get_num_threads, parallel_map
from .params import DEFAULT_LEAF_SIZE, SearchParams
from .tree import (
    HilbertForest,
    batch_positions,
    build_forest,
    read_forest,
    window_starts,
    write_forest,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

#: Queries carried through the pipeline together; bounds the C1 matrix.
QUERY_CHUNK = 256

_INDEX_META = struct.Struct("<IQ")


@dataclass
class MasterOrder:
    """The Hilbert permutation by which codes are physically laid out."""

    perm: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_perm(cls, perm) -> "MasterOrder":
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.shape[0], dtype=np.int64)
        return cls(perm=perm, inverse=inverse)

    def __len__(self) -> int:
        return self.perm.shape[0]


@dataclass
class AnnIndex:
    """
    Everything a search needs, built from one dataset and one seed.

    Attributes:
        dataset: The indexed float vectors (read for in-leaf refinement and
            for exact re-ranking)
        forest: Hilbert trees
        master: Master order (tree 0's order)
        codes: Packed codes in master order
        quantizer: Quantization ranges
        seed: Global seed of the forest
    """

    dataset: VectorDataset
    forest: HilbertForest
    master: MasterOrder
    codes: CodeTable
    quantizer: QuantizerParams
    seed: int

    @property
    def bounds(self) -> GridBounds:
        return self.forest.bounds

    @property
    def count(self) -> int:
        return self.dataset.count

    @property
    def dim(self) -> int:
        return self.dataset.dim

    @property
    def n_trees(self) -> int:
        return len(self.forest)


@dataclass
class SearchStats:
    """
    Per-query counters of one search run.

    Attributes:
        c1_slots: Forest candidates including duplicates
        hamming_evals: Distinct candidates whose sketch distance was computed
        c2_size: Sketch-stage survivors
        full_distance_evals: Vector distances computed after expansion
        seconds: Wall-clock time of the run
    """

    c1_slots: np.ndarray
    hamming_evals: np.ndarray
    c2_size: np.ndarray
    full_distance_evals: np.ndarray
    seconds: float = 0.0
    threads: int = field(default_factory=get_num_threads)

    @property
    def query_count(self) -> int:
        return self.c1_slots.shape[0]


@dataclass
class IndexBuildStats:
    """
    Wall-clock seconds of each preprocessing stage.

    Sketches are the top bits of the codes, so ``codes_seconds`` covers both.
    """

    quantizer_seconds: float
    forest_seconds: float
    master_seconds: float
    codes_seconds: float
    forest_bytes: int
    code_bytes: int
    threads: int = field(default_factory=get_num_threads)

    @property
    def seconds(self) -> float:
        return self.quantizer_seconds + self.forest_seconds + self.master_seconds + self.codes_seconds

    def counters(self) -> Dict[str, float]:
        return {
            "quantizer_seconds": self.quantizer_seconds,
            "forest_seconds": self.forest_seconds,
            "master_seconds": self.master_seconds,
            "codes_seconds": self.codes_seconds,
            "forest_bytes": self.forest_bytes,
            "code_bytes": self.code_bytes,
        }


def build_index_with_stats(
    ds: VectorDataset,
    n: int,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    seed: int = 0,
    bits_per_axis: int = DEFAULT_BITS_PER_AXIS,
) -> Tuple[AnnIndex, IndexBuildStats]:
    """
    Run the preprocessing steps, timing each one.

    Args:
        ds: Nonempty dataset
        n: Number of trees
        leaf_size: Maximum ids per leaf
        seed: Global seed; tree t's axis permutation derives from (seed, t)
        bits_per_axis: Grid resolution of every curve

    Returns:
        Tuple of (index, stats); the index's master order is tree 0's Hilbert order
    """
    if ds.count == 0:
        raise ParameterError("Cannot index an empty dataset")
    t0 = time.perf_counter()
    quantizer = fit_quantizer(ds)
    t1 = time.perf_counter()
    forest = build_forest(ds, n, leaf_size, seed, bits_per_axis)
    t2 = time.perf_counter()
    master = MasterOrder.from_perm(forest[0].perm)
    t3 = time.perf_counter()
    codes = build_code_table(ds, quantizer, master.perm)
    t4 = time.perf_counter()
    stats = IndexBuildStats(
        quantizer_seconds=t1 - t0,
        forest_seconds=t2 - t1,
        master_seconds=t3 - t2,
        codes_seconds=t4 - t3,
        forest_bytes=forest.nbytes,
        code_bytes=codes.nbytes,
    )
    logger.info(
        "Built index over %d points: %d trees, leaf_size=%d, %.2fs (forest %.2fs, codes %.2fs)",
        ds.count,
        n,
        leaf_size,
        stats.seconds,
        stats.forest_seconds,
        stats.codes_seconds,
    )
    return AnnIndex(ds, forest, master, codes, quantizer, seed), stats


def build_index(
    ds: VectorDataset,
    n: int,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    seed: int = 0,
    bits_per_axis: int = DEFAULT_BITS_PER_AXIS,
) -> AnnIndex:
    """Run the preprocessing steps; see :func:`build_index_with_stats`."""
    index, _ = build_index_with_stats(ds, n, leaf_size, seed, bits_per_axis)
    return index


def _check_queries(index: AnnIndex, queries: VectorDataset) -> None:
    if queries.dim != index.dim:
        raise DimensionMismatchError(
            f"Dimension mismatch: queries have dim {queries.dim}, index has dim {index.dim}"
        )


def collect_candidates(index: AnnIndex, queries: VectorDataset, n: int, k1: int) -> np.ndarray:
    """
    Forest stage: the ``k1``-window of every query in each of the first ``n`` trees.

    All queries are positioned against one tree before moving to the next.

    Returns:
        int64 matrix (Q, n * min(k1, count)); row i is the multiset C1[i]
    """
    _check_queries(index, queries)
    if not 1 <= n <= index.n_trees:
        raise ParameterError(f"n must be in [1, {index.n_trees}], got {n}")
    if k1 < 1:
        raise ParameterError(f"k1 must be >= 1, got {k1}")
    width = min(k1, index.count)
    out = np.empty((queries.count, n * width), dtype=np.int64)
    if queries.count == 0:
        return out
    offsets = np.arange(width, dtype=np.int64)
    blocks = [(s, min(s + QUERY_CHUNK, queries.count)) for s in range(0, queries.count, QUERY_CHUNK)]
    for t in range(n):
        tree = index.forest[t]
        parts = parallel_map(
            lambda span: batch_positions(tree, queries.take(range(*span)), index.dataset),
            blocks,
        )
        positions = np.concatenate(parts)
        starts = window_starts(positions, width, index.count)
        out[:, t * width : (t + 1) * width] = tree.perm[starts[:, None] + offsets]
        logger.debug("Tree %d positioned %d queries", t, queries.count)
    return out


def expand_master(index: AnnIndex, ids, h: int) -> np.ndarray:
    """
    Add the ``h`` master-order neighbors on each side of every id.

    Returns:
        Sorted distinct ids, at most ``len(ids) * (2h + 1)`` of them
    """
    if h < 0:
        raise ParameterError(f"h must be >= 0, got {h}")
    ids = np.asarray(ids, dtype=np.int64)
    if h == 0 or ids.size == 0:
        return np.unique(ids)
    positions = index.master.inverse[ids]
    spread = positions[:, None] + np.arange(-h, h + 1, dtype=np.int64)
    spread = np.unique(np.clip(spread, 0, index.count - 1))
    return np.unique(index.master.perm[spread])


def _finish_query(
    index: AnnIndex, query: np.ndarray, c1: np.ndarray, params: SearchParams, width: int
) -> Tuple[np.ndarray, int, int, int]:
    qsketch = sketch_of(quantize(query, index.quantizer))
    c2 = sketch_topk(c1, qsketch, index.codes, params.k2)
    pool = expand_master(index, c2, params.h)
    if params.exact_final:
        dists = squared_l2(index.dataset.data[pool], query)
    else:
        dists = asymmetric_distances(query, index.codes.codes_of(pool), index.quantizer)
    top = rank_by_distance(pool, dists, width)
    row = np.full(width, MISSING_ID, dtype=np.int64)
    row[: top.shape[0]] = top
    hamming_evals = np.unique(c1).shape[0]
    return row, hamming_evals, c2.shape[0], pool.shape[0]


def search_with_stats(
    index: AnnIndex, queries: VectorDataset, params: SearchParams
) -> Tuple[ResultSet, SearchStats]:
    """
    Batched three-stage search with per-stage counters.

    Rows hold ``min(k, count)`` ids sorted by (distance, id); a row whose
    candidate pool is smaller than that ends in ``MISSING_ID`` padding.
    """
    params.validate()
    _check_queries(index, queries)
    if params.n > index.n_trees:
        raise ParameterError(f"n must be <= {index.n_trees} (forest size), got {params.n}")
    start = time.perf_counter()
    width = min(params.k, index.count)
    Q = queries.count
    rows = np.full((Q, width), MISSING_ID, dtype=np.int64)
    c1_slots = np.zeros(Q, dtype=np.int64)
    hamming = np.zeros(Q, dtype=np.int64)
    c2_size = np.zeros(Q, dtype=np.int64)
    full = np.zeros(Q, dtype=np.int64)
    for lo in range(0, Q, QUERY_CHUNK):
        hi = min(lo + QUERY_CHUNK, Q)
        chunk = queries.take(range(lo, hi))
        c1 = collect_candidates(index, chunk, params.n, params.k1)
        c1_slots[lo:hi] = c1.shape[1]
        finished = parallel_map(
            lambda i: _finish_query(index, chunk.data[i], c1[i], params, width),
            range(hi - lo),
        )
        for i, (row, h_evals, c2n, f_evals) in enumerate(finished):
            rows[lo + i] = row
            hamming[lo + i] = h_evals
            c2_size[lo + i] = c2n
            full[lo + i] = f_evals
    seconds = time.perf_counter() - start
    logger.info("Searched %d queries with %s in %.2fs", Q, params, seconds)
    stats = SearchStats(c1_slots, hamming, c2_size, full, seconds)
    return ResultSet(rows, k=width), stats


def search(index: AnnIndex, queries: VectorDataset, params: SearchParams) -> ResultSet:
    """Approximate k-NN of every query; see :func:`search_with_stats`."""
    return search_with_stats(index, queries, params)[0]


def count_distance_evals(stats: SearchStats) -> Dict[str, Dict[str, float]]:
    """
    Summarise per-stage counters.

    Returns:
        ``{stage: {"total", "mean", "max"}}`` for the stages ``c1_slots``,
        ``hamming``, ``c2`` and ``full_distance``
    """
    out = {}
    for name, values in (
        ("c1_slots", stats.c1_slots),
        ("hamming", stats.hamming_evals),
        ("c2", stats.c2_size),
        ("full_distance", stats.full_distance_evals),
    ):
        empty = values.size == 0
        out[name] = {
            "total": int(values.sum()),
            "mean": 0.0 if empty else float(values.mean()),
            "max": 0 if empty else int(values.max()),
        }
    return out


def write_index(fh: BinaryIO, index: AnnIndex) -> None:
    binfmt.write_header(fh, binfmt.MAGIC_INDEX, index.dim, index.count)
    fh.write(_INDEX_META.pack(index.n_trees, index.seed))
    write_vectors(fh, index.dataset)
    write_forest(fh, index.forest)
    write_code_table(fh, index.codes)


def read_index(fh: BinaryIO, source: str = "<stream>") -> AnnIndex:
    dim, count = binfmt.read_header(fh, binfmt.MAGIC_INDEX, source)
    raw = fh.read(_INDEX_META.size)
    if len(raw) < _INDEX_META.size:
        raise DatasetFormatError(f"Truncated index metadata in {source}")
    n_trees, seed = _INDEX_META.unpack(raw)
    dataset = read_vectors(fh, source)
    forest = read_forest(fh, source)
    codes = read_code_table(fh, source)
    if (
        dataset.dim != dim
        or dataset.count != count
        or forest.count != count
        or codes.count != count
        or len(forest) != n_trees
        or forest.global_seed != seed
    ):
        raise DatasetFormatError(f"Index components in {source} disagree with its header")
    if codes.perm is None or not np.array_equal(codes.perm, forest[0].perm):
        raise DatasetFormatError(f"Code table in {source} is not stored in master order")
    master = MasterOrder.from_perm(codes.perm)
    return AnnIndex(dataset, forest, master, codes, codes.params, seed)


def save_index(index: AnnIndex, path: PathLike) -> None:
    """Persist an index: dataset, forest, and master-ordered code table."""
    with Path(path).open("wb") as fh:
        write_index(fh, index)


def load_index(path: PathLike) -> AnnIndex:
    """Load an index written by :func:`save_index`."""
    path = Path(path)
    with path.open("rb") as fh:
        index = read_index(fh, str(path))
        binfmt.expect_eof(fh, str(path))
    logger.debug("Loaded index with %d trees over %d points", index.n_trees, index.count)
    return index
