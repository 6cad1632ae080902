"""
Leaf-compressed Hilbert trees and forests of them

A tree keeps the Hilbert-ordered id sequence of one curve, cut into leaves of
at most ``leaf_size`` ids, and the key of the first point of every leaf but the
first. Locating a query is a binary search over those separator keys followed
by a linear refinement inside one leaf, so the full search tree over all
points is never materialised.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import binfmt
from .curve import (
    DEFAULT_BITS_PER_AXIS,
    DEFAULT_KEY_WIDTH_LIMIT,
    CurveConfig,
    GridBounds,
    compute_bounds,
    derive_curve_config,
    encode_batch,
    hilbert_sort,
    keys_less,
)
from .dataset import VectorDataset
from .errors import DatasetFormatError, DimensionMismatchError, ParameterError
from .parallel import parallel_map
from .params import DEFAULT_LEAF_SIZE

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# queries refined per block in batch_positions
_REFINE_BLOCK = 512

_FOREST_META = struct.Struct("<IIIIQ")


@dataclass
class HilbertTree:
    """
    One Hilbert order with its leaf summary.

    Attributes:
        cfg: Curve of this tree
        bounds: Grid bounds shared by the forest
        leaf_size: Maximum ids per leaf
        perm: Ids in Hilbert order
        separators: Key of the first point of leaves 1..L-1
    """

    cfg: CurveConfig
    bounds: GridBounds
    leaf_size: int
    perm: np.ndarray
    separators: np.ndarray

    @property
    def count(self) -> int:
        return self.perm.shape[0]

    @property
    def leaf_count(self) -> int:
        return (self.count + self.leaf_size - 1) // self.leaf_size

    @property
    def leaf_starts(self) -> np.ndarray:
        return np.arange(0, self.count, self.leaf_size, dtype=np.int64)

    def leaf_spans(self) -> Iterator[Tuple[int, int]]:
        """Yield ``(start, stop)`` positions of each leaf, in order."""
        for start in range(0, self.count, self.leaf_size):
            yield start, min(start + self.leaf_size, self.count)

    def sequence(self) -> np.ndarray:
        """The in-order id sequence (concatenation of all leaves)."""
        return self.perm

    @property
    def nbytes(self) -> int:
        """Bytes of the stored layout: a 32-bit id per point plus the separator keys."""
        return self.count * 4 + self.separators.nbytes

    def __eq__(self, other) -> bool:
        if not isinstance(other, HilbertTree):
            return NotImplemented
        return (
            self.cfg == other.cfg
            and self.leaf_size == other.leaf_size
            and np.array_equal(self.bounds.lo, other.bounds.lo)
            and np.array_equal(self.bounds.hi, other.bounds.hi)
            and np.array_equal(self.perm, other.perm)
            and np.array_equal(self.separators, other.separators)
        )


@dataclass
class HilbertForest:
    """Trees over the same dataset whose curves derive from ``global_seed``."""

    trees: List[HilbertTree]
    global_seed: int
    bounds: GridBounds

    def __len__(self) -> int:
        return len(self.trees)

    def __getitem__(self, t: int) -> HilbertTree:
        return self.trees[t]

    @property
    def count(self) -> int:
        return self.trees[0].count if self.trees else 0

    @property
    def dim(self) -> int:
        return self.bounds.dim

    @property
    def nbytes(self) -> int:
        return sum(tree.nbytes for tree in self.trees)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HilbertForest):
            return NotImplemented
        return self.global_seed == other.global_seed and self.trees == other.trees


def build_tree(
    ds: VectorDataset,
    cfg: CurveConfig,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    bounds: Optional[GridBounds] = None,
) -> HilbertTree:
    """
    Build a leaf-compressed tree over one Hilbert order.

    Args:
        ds: Dataset to index (may be empty)
        cfg: Curve of the tree
        leaf_size: Maximum ids per leaf (>= 1)
        bounds: Grid bounds; computed from ``ds`` when omitted

    Returns:
        HilbertTree whose leaves concatenate to ``hilbert_sort(ds, cfg).perm``
    """
    if leaf_size < 1:
        raise ParameterError(f"leaf_size must be >= 1, got {leaf_size}")
    bounds = bounds if bounds is not None else compute_bounds(ds)
    order = hilbert_sort(ds, cfg, bounds)
    starts = np.arange(leaf_size, ds.count, leaf_size, dtype=np.int64)
    separators = order.keys[starts].copy()
    return HilbertTree(
        cfg=cfg,
        bounds=bounds,
        leaf_size=leaf_size,
        perm=order.perm,
        separators=separators,
    )


def build_forest(
    ds: VectorDataset,
    n: int,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    global_seed: int = 0,
    bits_per_axis: int = DEFAULT_BITS_PER_AXIS,
    key_width_limit: int = DEFAULT_KEY_WIDTH_LIMIT,
) -> HilbertForest:
    """
    Build ``n`` trees with axis permutations derived from ``(global_seed, t)``.

    Trees are built in parallel; the forest does not depend on the thread count.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    bounds = compute_bounds(ds)
    configs = [
        derive_curve_config(ds.dim, bits_per_axis, global_seed, t, key_width_limit)
        for t in range(n)
    ]
    trees = parallel_map(lambda cfg: build_tree(ds, cfg, leaf_size, bounds), configs)
    logger.info("Built Hilbert forest of %d trees over %d points", n, ds.count)
    return HilbertForest(trees=trees, global_seed=global_seed, bounds=bounds)


def batch_positions(tree: HilbertTree, queries: VectorDataset, ds: VectorDataset) -> np.ndarray:
    """
    Positions of all queries in the tree's Hilbert order.

    The separator keys pick each query's leaf; the leaf's points are then
    encoded and compared linearly, so the answer equals
    :func:`~hilbertforest.curve.position_search` against the full order.

    Args:
        tree: Tree to search
        queries: Query vectors
        ds: The dataset the tree was built from (read for in-leaf refinement)

    Returns:
        int64 array of insertion positions in [0, count]
    """
    if queries.dim != tree.cfg.dim:
        raise DimensionMismatchError(
            f"Dimension mismatch: queries have dim {queries.dim}, tree has dim {tree.cfg.dim}"
        )
    if ds.count != tree.count:
        raise DimensionMismatchError(
            f"Dataset holds {ds.count} points but the tree indexes {tree.count}"
        )
    out = np.zeros(queries.count, dtype=np.int64)
    if queries.count == 0 or tree.count == 0:
        return out
    qkeys = encode_batch(queries.data, tree.bounds, tree.cfg)
    leaves = np.searchsorted(tree.separators, qkeys, side="left").astype(np.int64)
    for start in range(0, queries.count, _REFINE_BLOCK):
        stop = min(start + _REFINE_BLOCK, queries.count)
        out[start:stop] = _refine(tree, ds, qkeys[start:stop], leaves[start:stop])
    return out


def _refine(tree: HilbertTree, ds: VectorDataset, qkeys: np.ndarray, leaves: np.ndarray) -> np.ndarray:
    """Exact positions of a block of queries whose leaves are known."""
    unique, slot = np.unique(leaves, return_inverse=True)
    leaf_start = unique * tree.leaf_size
    offsets = np.arange(tree.leaf_size, dtype=np.int64)
    positions = leaf_start[:, None] + offsets[None, :]
    valid = positions < tree.count
    ids = tree.perm[np.minimum(positions, tree.count - 1)]
    keys = encode_batch(ds.data[ids.ravel()], tree.bounds, tree.cfg).reshape(ids.shape)
    before = keys_less(keys[slot], qkeys[:, None]) & valid[slot]
    return leaf_start[slot] + before.sum(axis=1)


def window_starts(positions: np.ndarray, k: int, count: int) -> np.ndarray:
    """
    First position of the ``k`` positions nearest to each of ``positions``.

    The window is centred on the position, takes the lower side on ties, and
    is clamped to the sequence.
    """
    positions = np.asarray(positions, dtype=np.int64)
    return np.clip(positions - k // 2, 0, max(count - k, 0))


def extract_candidates(tree: HilbertTree, position: int, k1: int) -> np.ndarray:
    """
    Ids at the ``k1`` Hilbert positions nearest to ``position``.

    Returns:
        Array of ``min(k1, count)`` ids in Hilbert order
    """
    if k1 < 1:
        raise ParameterError(f"k1 must be >= 1, got {k1}")
    start = int(window_starts(np.array([position]), k1, tree.count)[0])
    return tree.perm[start : start + k1].copy()


def estimate_memory(
    structure,
    count: Optional[int] = None,
    dim: int = 384,
    *,
    n_trees: int = 1,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    bits_per_axis: int = DEFAULT_BITS_PER_AXIS,
) -> int:
    """
    Analytic memory footprint in bytes.

    Args:
        structure: A built forest or code table (its stored layout: the id and separator
            bytes :func:`save_forest` writes, or the packed codes), or one of
            ``"sketch"`` (one bit per dimension), ``"codes"`` (4-bit codes with
            the sketch sharing their top bits), ``"unshared"`` (sketch and codes
            stored separately), ``"vectors"`` (float32 payload) or ``"forest"``
            (this package's tree layout: a 4-byte id per point plus one
            separator key per leaf, times ``n_trees``)
        count: Number of points (ignored for built structures)
        dim: Vector dimension

    Examples:
        >>> estimate_memory("sketch", 23_000_000, 384)
        1104000000
        >>> estimate_memory("codes", 23_000_000, 384)
        4416000000
    """
    if hasattr(structure, "nbytes") and not isinstance(structure, str):
        return int(structure.nbytes)
    if count is None:
        raise ParameterError("count is required for a named structure")
    if count < 0:
        raise ParameterError(f"count must be >= 0, got {count}")
    sketch_bytes = (dim + 7) // 8
    code_bytes = (dim * 4 + 7) // 8
    if structure == "sketch":
        return count * sketch_bytes
    if structure == "codes":
        return count * code_bytes
    if structure == "unshared":
        return count * (sketch_bytes + code_bytes)
    if structure == "vectors":
        return count * dim * 4
    if structure in ("forest", "tree"):
        key_bytes = (dim * bits_per_axis + 7) // 8
        leaves = (count + leaf_size - 1) // leaf_size
        separators = max(leaves - 1, 0)
        return n_trees * (count * 4 + separators * key_bytes)
    raise ParameterError(f"Unknown structure {structure!r}")


def write_forest(fh: BinaryIO, forest: HilbertForest) -> None:
    """Write a forest to an open binary stream."""
    dim = forest.dim
    binfmt.write_header(fh, binfmt.MAGIC_FOREST, dim, forest.count)
    first = forest.trees[0]
    fh.write(
        _FOREST_META.pack(
            len(forest.trees),
            first.leaf_size,
            first.cfg.bits_per_axis,
            first.cfg.key_width_limit,
            forest.global_seed,
        )
    )
    binfmt.write_array(fh, forest.bounds.lo, "<f8")
    binfmt.write_array(fh, forest.bounds.hi, "<f8")
    for tree in forest.trees:
        binfmt.write_array(fh, np.asarray(tree.cfg.axis_perm), "<u4")
        binfmt.write_array(fh, tree.perm, "<u4")
        fh.write(tree.separators.tobytes())


def read_forest(fh: BinaryIO, source: str = "<stream>") -> HilbertForest:
    """Read a forest from an open binary stream."""
    dim, count = binfmt.read_header(fh, binfmt.MAGIC_FOREST, source)
    raw = fh.read(_FOREST_META.size)
    if len(raw) < _FOREST_META.size:
        raise DatasetFormatError(f"Truncated forest metadata in {source}")
    n_trees, leaf_size, bits, key_limit, seed = _FOREST_META.unpack(raw)
    if n_trees < 1 or leaf_size < 1:
        raise DatasetFormatError(f"Malformed forest metadata in {source}")
    bounds = GridBounds(
        binfmt.read_array(fh, "<f8", dim, source),
        binfmt.read_array(fh, "<f8", dim, source),
    )
    trees = []
    for _ in range(n_trees):
        axis_perm = binfmt.read_array(fh, "<u4", dim, source)
        cfg = CurveConfig(
            dim=dim,
            bits_per_axis=bits,
            axis_perm=tuple(int(a) for a in axis_perm),
            seed=seed,
            key_width_limit=key_limit,
        )
        perm = binfmt.read_array(fh, "<u4", count, source).astype(np.int64)
        n_sep = max((count + leaf_size - 1) // leaf_size - 1, 0)
        sep_raw = binfmt.read_array(fh, "u1", n_sep * cfg.key_bytes, source)
        separators = sep_raw.view(cfg.key_dtype).reshape(n_sep)
        if count and not np.array_equal(np.sort(perm), np.arange(count)):
            raise DatasetFormatError(f"Tree permutation in {source} is not a permutation")
        trees.append(HilbertTree(cfg, bounds, leaf_size, perm, separators))
    return HilbertForest(trees=trees, global_seed=seed, bounds=bounds)


def save_forest(forest: HilbertForest, path: PathLike) -> None:
    """Persist a forest (bit-exact round-trip with :func:`load_forest`)."""
    with Path(path).open("wb") as fh:
        write_forest(fh, forest)


def load_forest(path: PathLike) -> HilbertForest:
    """Load a forest written by :func:`save_forest`."""
    path = Path(path)
    with path.open("rb") as fh:
        forest = read_forest(fh, str(path))
        binfmt.expect_eof(fh, str(path))
    return forest
