"""
Hilbert orders of high-dimensional points

Points are mapped affinely onto a grid of ``2^m`` cells per axis, the axes are
reordered by the curve's axis permutation, and the grid cell is turned into a
``d*m``-bit Hilbert index with the bit-transform (Gray code / rotation)
algorithm. Keys are handled as fixed-width big-endian byte strings so that
comparing the bytes compares the indices numerically.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .dataset import VectorDataset
from .errors import DimensionMismatchError, KeyRangeError, ParameterError

logger = logging.getLogger(__name__)

DEFAULT_BITS_PER_AXIS = 8
DEFAULT_KEY_WIDTH_LIMIT = 4096
MAX_BITS_PER_AXIS = 32

# points encoded per batch; bounds the (chunk, d) temporaries
_ENCODE_CHUNK = 1 << 15


class Ordering(enum.IntEnum):
    """Result of :func:`hilbert_compare`."""

    LT = -1
    EQ = 0
    GT = 1


@dataclass(frozen=True)
class CurveConfig:
    """
    One Hilbert order: dimension, grid resolution and axis permutation.

    Args:
        dim: Number of coordinates d
        bits_per_axis: m; the grid has 2^m cells per axis
        axis_perm: Permutation of range(dim); grid axis j takes input axis
            axis_perm[j]. Identity when omitted.
        seed: Seed the permutation was derived from (recorded, not used)
        key_width_limit: Maximum d*m in bits
    """

    dim: int
    bits_per_axis: int = DEFAULT_BITS_PER_AXIS
    axis_perm: Optional[Tuple[int, ...]] = None
    seed: int = 0
    key_width_limit: int = DEFAULT_KEY_WIDTH_LIMIT

    def __post_init__(self):
        if self.axis_perm is None:
            object.__setattr__(self, "axis_perm", tuple(range(self.dim)))
        else:
            object.__setattr__(self, "axis_perm", tuple(int(a) for a in self.axis_perm))
        self.validate()

    def validate(self) -> None:
        if self.dim < 1:
            raise ParameterError(f"dim must be >= 1, got {self.dim}")
        if not 1 <= self.bits_per_axis <= MAX_BITS_PER_AXIS:
            raise ParameterError(
                f"bits_per_axis must be in [1, {MAX_BITS_PER_AXIS}], got {self.bits_per_axis}"
            )
        if sorted(self.axis_perm) != list(range(self.dim)):
            raise ParameterError(
                f"axis_perm must be a permutation of range({self.dim}), got {self.axis_perm}"
            )
        if self.key_bits > self.key_width_limit:
            raise KeyRangeError(
                f"Key width {self.dim} x {self.bits_per_axis} = {self.key_bits} bits "
                f"exceeds the limit of {self.key_width_limit} bits"
            )

    @property
    def key_bits(self) -> int:
        return self.dim * self.bits_per_axis

    @property
    def key_bytes(self) -> int:
        return (self.key_bits + 7) // 8

    @property
    def max_coord(self) -> int:
        return (1 << self.bits_per_axis) - 1

    @property
    def key_dtype(self) -> np.dtype:
        return np.dtype(f"S{self.key_bytes}")


@dataclass(frozen=True)
class GridPoint:
    """A grid cell, coordinates already in the curve's axis order."""

    coords: Tuple[int, ...]


@dataclass(frozen=True, order=True)
class HilbertKey:
    """Position of a grid cell along the curve."""

    index: int


@dataclass(frozen=True)
class GridBounds:
    """Per-dimension minimum and maximum used for grid mapping."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionMismatchError(
                f"Bounds must be two vectors of equal length, got {lo.shape} and {hi.shape}"
            )
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ParameterError("Bounds must be finite")
        if (lo > hi).any():
            j = int(np.argmax(lo > hi))
            raise ParameterError(f"Bounds minimum exceeds maximum in dimension {j}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]


@dataclass
class HilbertOrder:
    """
    Dataset ids sorted along one curve.

    Attributes:
        perm: perm[p] is the id at position p
        inverse: inverse[id] is the position of id
        keys: Sorted keys (fixed-width byte strings), or None when not retained
    """

    perm: np.ndarray
    inverse: np.ndarray
    keys: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_perm(cls, perm: np.ndarray, keys: Optional[np.ndarray] = None) -> "HilbertOrder":
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.shape[0], dtype=np.int64)
        return cls(perm=perm, inverse=inverse, keys=keys)

    def __len__(self) -> int:
        return self.perm.shape[0]


def compute_bounds(ds: VectorDataset) -> GridBounds:
    """Per-dimension min/max of ``ds``; an empty dataset gets the unit box at 0."""
    if ds.count == 0:
        zeros = np.zeros(ds.dim)
        return GridBounds(zeros, zeros)
    return GridBounds(ds.data.min(axis=0), ds.data.max(axis=0))


def derive_curve_config(
    dim: int,
    bits_per_axis: int,
    global_seed: int,
    index: int,
    key_width_limit: int = DEFAULT_KEY_WIDTH_LIMIT,
) -> CurveConfig:
    """
    Curve number ``index`` of a family seeded with ``global_seed``.

    The axis permutation comes from a counter-based generator keyed by
    ``(global_seed, index)``, so any member can be rebuilt on its own.
    """
    if global_seed < 0 or index < 0:
        raise ParameterError("seed and curve index must be non-negative")
    key = np.array([global_seed & 0xFFFFFFFFFFFFFFFF, index], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    perm = tuple(int(a) for a in rng.permutation(dim))
    return CurveConfig(
        dim=dim,
        bits_per_axis=bits_per_axis,
        axis_perm=perm,
        seed=global_seed,
        key_width_limit=key_width_limit,
    )


def to_grid_batch(points: np.ndarray, bounds: GridBounds, cfg: CurveConfig) -> np.ndarray:
    """
    Map float points onto the grid.

    Coordinate j maps affinely from [lo_j, hi_j] onto [0, 2^m - 1], rounds half
    up, clamps, and degenerate dimensions map to 0. Columns are returned in the
    curve's axis order.

    Returns:
        uint64 array of shape (n, d)
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[None, :]
    if points.shape[1] != cfg.dim or bounds.dim != cfg.dim:
        raise DimensionMismatchError(
            f"Dimension mismatch: points have dim {points.shape[1]}, bounds {bounds.dim}, "
            f"curve {cfg.dim}"
        )
    span = bounds.hi - bounds.lo
    degenerate = span <= 0
    scale = np.where(degenerate, 0.0, cfg.max_coord / np.where(degenerate, 1.0, span))
    cells = np.floor((points - bounds.lo) * scale + 0.5)
    np.clip(cells, 0, cfg.max_coord, out=cells)
    cells = cells.astype(np.uint64)
    return cells[:, list(cfg.axis_perm)]


def to_grid(v: Sequence[float], bounds: GridBounds, cfg: CurveConfig) -> GridPoint:
    """Grid cell of a single vector; see :func:`to_grid_batch`."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatchError(f"Expected a single vector, got shape {v.shape}")
    cells = to_grid_batch(v, bounds, cfg)[0]
    return GridPoint(tuple(int(c) for c in cells))


def _axes_to_transpose(X: list, bits: int) -> None:
    """In-place forward transform of d coordinate columns (one per axis)."""
    d = len(X)
    M = 1 << (bits - 1)
    Q = M
    while Q > 1:
        q, p = np.uint64(Q), np.uint64(Q - 1)
        for i in range(d):
            hit = (X[i] & q) != 0
            if i == 0:
                X[0] ^= np.where(hit, p, np.uint64(0))
                continue
            t = (X[0] ^ X[i]) & p
            t[hit] = 0
            X[0] ^= np.where(hit, p, t)
            X[i] ^= t
        Q >>= 1
    for i in range(1, d):
        X[i] ^= X[i - 1]
    t = np.zeros_like(X[0])
    Q = M
    while Q > 1:
        t ^= np.where((X[d - 1] & np.uint64(Q)) != 0, np.uint64(Q - 1), np.uint64(0))
        Q >>= 1
    for i in range(d):
        X[i] ^= t


def _transpose_to_axes(X: list, bits: int) -> None:
    """In-place inverse of :func:`_axes_to_transpose`."""
    d = len(X)
    N = 2 << (bits - 1)
    t = X[d - 1] >> np.uint64(1)
    for i in range(d - 1, 0, -1):
        X[i] ^= X[i - 1]
    X[0] ^= t
    Q = 2
    while Q != N:
        q, p = np.uint64(Q), np.uint64(Q - 1)
        for i in range(d - 1, -1, -1):
            hit = (X[i] & q) != 0
            if i == 0:
                X[0] ^= np.where(hit, p, np.uint64(0))
                continue
            t = (X[0] ^ X[i]) & p
            t[hit] = 0
            X[0] ^= np.where(hit, p, t)
            X[i] ^= t
        Q <<= 1


def _encode_chunk(cells: np.ndarray, cfg: CurveConfig) -> np.ndarray:
    bits, d = cfg.bits_per_axis, cfg.dim
    n = cells.shape[0]
    X = [np.ascontiguousarray(cells[:, i]) for i in range(d)]
    _axes_to_transpose(X, bits)
    pad = cfg.key_bytes * 8 - cfg.key_bits
    bitmat = np.zeros((n, cfg.key_bytes * 8), dtype=np.uint8)
    for level in range(bits):
        shift = np.uint64(bits - 1 - level)
        start = pad + level * d
        for i in range(d):
            bitmat[:, start + i] = (X[i] >> shift) & np.uint64(1)
    return np.packbits(bitmat, axis=1)


def encode_grid_batch(cells: np.ndarray, cfg: CurveConfig) -> np.ndarray:
    """
    Hilbert keys of many grid cells.

    Args:
        cells: Integer array (n, d) in curve axis order, each in [0, 2^m)

    Returns:
        Array of n fixed-width byte strings (dtype ``S{key_bytes}``),
        big-endian, so byte order equals numeric order
    """
    cells = np.asarray(cells)
    if cells.ndim != 2 or cells.shape[1] != cfg.dim:
        raise DimensionMismatchError(
            f"Dimension mismatch: cells have shape {cells.shape}, curve dim is {cfg.dim}"
        )
    if cells.size and (cells.min() < 0 or cells.max() > cfg.max_coord):
        raise KeyRangeError(
            f"Grid coordinate outside [0, {cfg.max_coord}] for bits_per_axis={cfg.bits_per_axis}"
        )
    cells = cells.astype(np.uint64)
    n = cells.shape[0]
    out = np.empty((n, cfg.key_bytes), dtype=np.uint8)
    for start in range(0, n, _ENCODE_CHUNK):
        stop = min(n, start + _ENCODE_CHUNK)
        out[start:stop] = _encode_chunk(cells[start:stop], cfg)
    return out.view(cfg.key_dtype).reshape(n)


def encode_batch(points: np.ndarray, bounds: GridBounds, cfg: CurveConfig) -> np.ndarray:
    """Keys of float points: :func:`to_grid_batch` then :func:`encode_grid_batch`."""
    return encode_grid_batch(to_grid_batch(points, bounds, cfg), cfg)


def key_bytes_to_int(key: bytes, cfg: CurveConfig) -> int:
    """Integer value of a fixed-width key."""
    return int.from_bytes(bytes(key).ljust(cfg.key_bytes, b"\0"), "big")


def hilbert_encode(p: GridPoint, cfg: CurveConfig) -> HilbertKey:
    """
    Hilbert index of a grid cell.

    The map is a bijection from the grid onto [0, 2^(d*m)); the origin encodes
    to 0, and consecutive indices belong to cells at L1 distance 1.
    """
    cells = np.asarray(p.coords, dtype=np.int64)[None, :]
    raw = encode_grid_batch(cells, cfg).view(np.uint8).tobytes()
    return HilbertKey(key_bytes_to_int(raw, cfg))


def decode_keys(keys: np.ndarray, cfg: CurveConfig) -> np.ndarray:
    """
    Inverse of :func:`encode_grid_batch`.

    Returns:
        uint64 array (n, d) of grid cells
    """
    keys = np.ascontiguousarray(keys, dtype=cfg.key_dtype)
    n = keys.shape[0]
    raw = keys.view(np.uint8).reshape(n, cfg.key_bytes)
    bitmat = np.unpackbits(raw, axis=1)[:, cfg.key_bytes * 8 - cfg.key_bits :]
    bitmat = bitmat.reshape(n, cfg.bits_per_axis, cfg.dim).astype(np.uint64)
    X = []
    for i in range(cfg.dim):
        col = np.zeros(n, dtype=np.uint64)
        for level in range(cfg.bits_per_axis):
            col |= bitmat[:, level, i] << np.uint64(cfg.bits_per_axis - 1 - level)
        X.append(col)
    _transpose_to_axes(X, cfg.bits_per_axis)
    return np.stack(X, axis=1) if X else np.zeros((n, 0), dtype=np.uint64)


def hilbert_decode(k: HilbertKey, cfg: CurveConfig) -> GridPoint:
    """
    Grid cell at Hilbert index ``k``.

    Raises:
        KeyRangeError: If ``k`` is outside [0, 2^(d*m))
    """
    index = k.index if isinstance(k, HilbertKey) else int(k)
    if not 0 <= index < (1 << cfg.key_bits):
        raise KeyRangeError(
            f"Key {index} outside [0, 2^{cfg.key_bits}) for dim={cfg.dim}, "
            f"bits_per_axis={cfg.bits_per_axis}"
        )
    raw = np.frombuffer(index.to_bytes(cfg.key_bytes, "big"), dtype=np.uint8)
    cells = decode_keys(raw.view(cfg.key_dtype), cfg)[0]
    return GridPoint(tuple(int(c) for c in cells))


def hilbert_compare(a, b, bounds: GridBounds, cfg: CurveConfig) -> Ordering:
    """
    Compare two float vectors in Hilbert order.

    Consistent with encoding their grid cells; EQ exactly when both fall into
    the same cell.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (cfg.dim,) or b.shape != (cfg.dim,):
        raise DimensionMismatchError(
            f"Dimension mismatch: vectors have shapes {a.shape} and {b.shape}, curve dim is {cfg.dim}"
        )
    ka, kb = encode_batch(np.stack([a, b]), bounds, cfg).view(np.uint8).reshape(2, -1)
    ka, kb = ka.tobytes(), kb.tobytes()
    if ka < kb:
        return Ordering.LT
    if ka > kb:
        return Ordering.GT
    return Ordering.EQ


def hilbert_sort(
    ds: VectorDataset, cfg: CurveConfig, bounds: Optional[GridBounds] = None
) -> HilbertOrder:
    """
    Sort a dataset along the curve.

    Ties (points in the same cell) keep ascending id order; the result depends
    only on the data, ``cfg`` and ``bounds``.
    """
    if ds.dim != cfg.dim:
        raise DimensionMismatchError(
            f"Dimension mismatch: dataset has dim {ds.dim}, curve dim is {cfg.dim}"
        )
    bounds = bounds if bounds is not None else compute_bounds(ds)
    keys = encode_batch(ds.data, bounds, cfg)
    perm = np.argsort(keys, kind="stable")
    logger.debug("Hilbert-sorted %d points (axis_perm[0]=%d)", ds.count, cfg.axis_perm[0])
    return HilbertOrder.from_perm(perm, keys=keys[perm])


def position_search(
    order: HilbertOrder,
    ds: VectorDataset,
    q,
    bounds: GridBounds,
    cfg: CurveConfig,
) -> int:
    """
    Insertion position of ``q`` in a Hilbert-sorted sequence.

    Returns the number of points strictly before ``q`` in Hilbert order, so a
    query in the same cell as the point at position p (and not after any
    earlier equal point) gets p.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (cfg.dim,):
        raise DimensionMismatchError(
            f"Dimension mismatch: query has shape {q.shape}, curve dim is {cfg.dim}"
        )
    keys = order.keys
    if keys is None:
        keys = encode_batch(ds.data[order.perm], bounds, cfg)
    qkey = encode_batch(q, bounds, cfg)
    return int(np.searchsorted(keys, qkey, side="left")[0])


def keys_less(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Elementwise ``a < b`` for broadcastable arrays of fixed-width keys.

    Works on the raw bytes, comparing at the first differing byte.
    """
    a, b = np.broadcast_arrays(a, b)
    width = a.dtype.itemsize
    ra = np.ascontiguousarray(a).view(np.uint8).reshape(a.shape + (width,))
    rb = np.ascontiguousarray(b).view(np.uint8).reshape(b.shape + (width,))
    differ = ra != rb
    first = np.argmax(differ, axis=-1)[..., None]
    ba = np.take_along_axis(ra, first, axis=-1)[..., 0]
    bb = np.take_along_axis(rb, first, axis=-1)[..., 0]
    return differ.any(axis=-1) & (ba < bb)
