"""
4-bit scalar quantization with binary sketches sharing the codes' top bits

Each coordinate is quantized to one of 16 uniformly spaced levels between the
dimension's minimum and maximum. Two codes are packed per byte (even dimension
in the high nibble). The sketch bit of a dimension is bit 3 of its code, so
the sketch of a stored point is read straight from the packed bytes through
the mask ``0x88`` and costs no extra memory.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional, Union

import numpy as np

from . import binfmt
from .dataset import VectorDataset
from .distance import rank_by_distance, squared_l2
from .errors import DatasetFormatError, DimensionMismatchError, ParameterError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LEVELS = 16
MAX_CODE = LEVELS - 1
SKETCH_THRESHOLD = 8
SKETCH_MASK = np.uint8(0x88)

POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1).astype(np.int64)


@dataclass(frozen=True)
class QuantizerParams:
    """Per-dimension quantization range; 16 levels."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionMismatchError(
                f"Quantizer bounds must be equal-length vectors, got {lo.shape} and {hi.shape}"
            )
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ParameterError("Quantizer bounds must be finite")
        if (lo > hi).any():
            raise ParameterError(
                f"Quantizer minimum exceeds maximum in dimension {int(np.argmax(lo > hi))}"
            )
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def levels(self) -> int:
        return LEVELS

    @property
    def degenerate(self) -> np.ndarray:
        """Mask of dimensions with min == max."""
        return self.hi <= self.lo

    @property
    def step(self) -> np.ndarray:
        """Width of one quantization level per dimension."""
        return (self.hi - self.lo) / MAX_CODE

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizerParams):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)


def fit_quantizer(ds: VectorDataset) -> QuantizerParams:
    """
    Column minima and maxima of ``ds``.

    Raises:
        DatasetFormatError: If ``ds`` is empty
    """
    if ds.count == 0:
        raise DatasetFormatError("Cannot fit a quantizer to an empty dataset")
    params = QuantizerParams(ds.data.min(axis=0), ds.data.max(axis=0))
    if params.degenerate.any():
        logger.debug("%d degenerate dimensions", int(params.degenerate.sum()))
    return params


def quantize_batch(points: np.ndarray, params: QuantizerParams) -> np.ndarray:
    """
    Quantize many vectors.

    code = clamp(round_half_up((v - min) / (max - min) * 15), 0, 15);
    degenerate dimensions get code 0.

    Returns:
        uint8 array (n, d) with values in [0, 15]
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[None, :]
    if points.shape[1] != params.dim:
        raise DimensionMismatchError(
            f"Dimension mismatch: vectors have dim {points.shape[1]}, quantizer has dim {params.dim}"
        )
    span = params.hi - params.lo
    degenerate = params.degenerate
    scale = np.where(degenerate, 0.0, MAX_CODE / np.where(degenerate, 1.0, span))
    codes = np.floor((points - params.lo) * scale + 0.5)
    np.clip(codes, 0, MAX_CODE, out=codes)
    return codes.astype(np.uint8)


def quantize(v, params: QuantizerParams) -> np.ndarray:
    """4-bit code vector of a single float vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatchError(f"Expected a single vector, got shape {v.shape}")
    return quantize_batch(v, params)[0]


def dequantize(code, params: QuantizerParams) -> np.ndarray:
    """Reconstruction ``min + code * (max - min) / 15`` (float64)."""
    code = np.asarray(code)
    if code.shape[-1] != params.dim:
        raise DimensionMismatchError(
            f"Dimension mismatch: codes have dim {code.shape[-1]}, quantizer has dim {params.dim}"
        )
    return params.lo + code.astype(np.float64) * params.step


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Pack (n, d) codes two per byte; odd d gets a zero low nibble at the end."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim == 1:
        codes = codes[None, :]
    if codes.shape[1] % 2:
        codes = np.concatenate([codes, np.zeros((codes.shape[0], 1), dtype=np.uint8)], axis=1)
    return (codes[:, 0::2] << 4) | codes[:, 1::2]


def unpack_codes(packed: np.ndarray, dim: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`."""
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.ndim == 1:
        packed = packed[None, :]
    out = np.empty((packed.shape[0], packed.shape[1] * 2), dtype=np.uint8)
    out[:, 0::2] = packed >> 4
    out[:, 1::2] = packed & 0x0F
    return out[:, :dim]


def sketch_of(code) -> np.ndarray:
    """
    Sketch of a code vector: bit j is set when code_j >= 8.

    Returns:
        Packed bit string (uint8, big-endian bit order, ceil(d / 8) bytes)
    """
    code = np.asarray(code)
    return np.packbits(code >= SKETCH_THRESHOLD, axis=-1)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """
    Number of differing bits between two packed bit strings of equal width.

    Raises:
        DimensionMismatchError: If the widths differ
    """
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Sketch widths differ: {a.shape} vs {b.shape}")
    return int(POPCOUNT[a ^ b].sum())


def _sketch_pattern(query_sketch: np.ndarray, dim: int) -> np.ndarray:
    """Spread a packed sketch into the nibble layout (bits at 0x80 / 0x08)."""
    bits = np.unpackbits(np.asarray(query_sketch, dtype=np.uint8))
    if bits.shape[0] < dim or bits[dim:].any():
        raise DimensionMismatchError(
            f"Sketch of {np.asarray(query_sketch).shape[0]} bytes does not match dim {dim}"
        )
    return pack_codes((bits[:dim] * SKETCH_THRESHOLD)[None, :])[0]


class CodeTable:
    """
    Packed 4-bit codes of a dataset, optionally stored in a permuted row order.

    Row ``r`` holds the codes of id ``perm[r]`` (identity when no permutation
    is given); :meth:`rows_of` maps ids to rows.
    """

    def __init__(
        self,
        packed: np.ndarray,
        dim: int,
        params: QuantizerParams,
        perm: Optional[np.ndarray] = None,
    ):
        packed = np.ascontiguousarray(packed, dtype=np.uint8)
        if packed.ndim != 2 or packed.shape[1] != (dim + 1) // 2:
            raise DimensionMismatchError(
                f"Packed codes of shape {packed.shape} do not hold {dim} 4-bit codes per row"
            )
        if params.dim != dim:
            raise DimensionMismatchError(
                f"Quantizer dim {params.dim} does not match code dim {dim}"
            )
        packed.setflags(write=False)
        self.packed = packed
        self.dim = dim
        self.params = params
        if perm is not None:
            perm = np.asarray(perm, dtype=np.int64)
            if perm.shape != (packed.shape[0],):
                raise DimensionMismatchError("Row permutation length does not match code count")
            inverse = np.empty_like(perm)
            inverse[perm] = np.arange(perm.shape[0], dtype=np.int64)
            self.perm, self.inverse = perm, inverse
        else:
            self.perm = self.inverse = None

    @property
    def count(self) -> int:
        return self.packed.shape[0]

    @property
    def nbytes(self) -> int:
        return self.packed.nbytes

    def rows_of(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        return ids if self.inverse is None else self.inverse[ids]

    def codes_of(self, ids) -> np.ndarray:
        """Unpacked (len(ids), d) codes of the given ids."""
        return unpack_codes(self.packed[self.rows_of(ids)], self.dim)

    def sketches(self) -> np.ndarray:
        """Packed sketches of every row, in row order (materialised on demand)."""
        return sketch_of(unpack_codes(self.packed, self.dim))

    def hamming_to(self, ids, query_sketch: np.ndarray) -> np.ndarray:
        """Hamming distances from ``query_sketch`` to the sketches of ``ids``."""
        pattern = _sketch_pattern(query_sketch, self.dim)
        rows = self.packed[self.rows_of(ids)]
        return POPCOUNT[(rows ^ pattern) & SKETCH_MASK].sum(axis=1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CodeTable):
            return NotImplemented
        same_perm = (self.perm is None and other.perm is None) or (
            self.perm is not None and other.perm is not None and np.array_equal(self.perm, other.perm)
        )
        return (
            self.dim == other.dim
            and self.params == other.params
            and np.array_equal(self.packed, other.packed)
            and same_perm
        )

    def __repr__(self) -> str:
        return f"CodeTable(count={self.count}, dim={self.dim}, nbytes={self.nbytes})"


def build_code_table(
    ds: VectorDataset, params: QuantizerParams, perm: Optional[np.ndarray] = None
) -> CodeTable:
    """
    Quantize ``ds``, storing rows in ``perm`` order when given.

    Args:
        ds: Dataset to encode
        params: Quantizer (usually ``fit_quantizer(ds)``)
        perm: Row order; row r holds id perm[r]
    """
    ds.check_dim(params.dim, "quantizer bounds")
    data = ds.data if perm is None else ds.data[np.asarray(perm, dtype=np.int64)]
    packed = pack_codes(quantize_batch(data, params))
    if ds.count == 0:
        packed = np.zeros((0, (ds.dim + 1) // 2), dtype=np.uint8)
    return CodeTable(packed, ds.dim, params, perm)


def sketch_topk(candidates, query_sketch: np.ndarray, code_table: CodeTable, k2: int) -> np.ndarray:
    """
    The ``k2`` distinct candidates nearest to ``query_sketch`` in Hamming distance.

    Candidates are deduplicated first; ties are broken by ascending id.

    Returns:
        int64 array of ``min(k2, #unique candidates)`` ids, sorted by (distance, id)
    """
    if k2 < 1:
        raise ParameterError(f"k2 must be >= 1, got {k2}")
    unique = np.unique(np.asarray(candidates, dtype=np.int64))
    if unique.size == 0:
        return unique
    dists = code_table.hamming_to(unique, query_sketch)
    return rank_by_distance(unique, dists, k2)


def asymmetric_distances(query, codes: np.ndarray, params: QuantizerParams) -> np.ndarray:
    """
    Squared L2 distance from a float query to dequantized codes.

    Degenerate dimensions are skipped: every point shares them, so they only
    shift all distances of a query by the same amount.

    Args:
        query: Float vector (d,)
        codes: Unpacked codes (n, d)
    """
    query = np.asarray(query, dtype=np.float64)
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[None, :]
    if query.shape != (params.dim,) or codes.shape[1] != params.dim:
        raise DimensionMismatchError(
            f"Dimension mismatch: query {query.shape}, codes {codes.shape}, quantizer dim {params.dim}"
        )
    keep = ~params.degenerate
    return squared_l2(dequantize(codes, params)[:, keep], query[keep])


def asymmetric_distance(query, point_code, params: QuantizerParams) -> float:
    """Squared L2 distance between a float query and one dequantized code."""
    return float(asymmetric_distances(query, np.asarray(point_code)[None, :], params)[0])


_PARAMS_FLAG = struct.Struct("<I")


def write_code_table(fh: BinaryIO, table: CodeTable) -> None:
    binfmt.write_header(fh, binfmt.MAGIC_CODES, table.dim, table.count)
    binfmt.write_array(fh, table.params.lo, "<f8")
    binfmt.write_array(fh, table.params.hi, "<f8")
    fh.write(_PARAMS_FLAG.pack(0 if table.perm is None else 1))
    if table.perm is not None:
        binfmt.write_array(fh, table.perm, "<u4")
    fh.write(table.packed.tobytes())


def read_code_table(fh: BinaryIO, source: str = "<stream>") -> CodeTable:
    dim, count = binfmt.read_header(fh, binfmt.MAGIC_CODES, source)
    params = QuantizerParams(
        binfmt.read_array(fh, "<f8", dim, source), binfmt.read_array(fh, "<f8", dim, source)
    )
    raw = fh.read(_PARAMS_FLAG.size)
    if len(raw) < _PARAMS_FLAG.size:
        raise DatasetFormatError(f"Truncated code table in {source}")
    (has_perm,) = _PARAMS_FLAG.unpack(raw)
    perm = None
    if has_perm:
        perm = binfmt.read_array(fh, "<u4", count, source).astype(np.int64)
        if not np.array_equal(np.sort(perm), np.arange(count)):
            raise DatasetFormatError(f"Code table row order in {source} is not a permutation")
    width = (dim + 1) // 2
    packed = binfmt.read_array(fh, "u1", count * width, source).reshape(count, width)
    return CodeTable(packed, dim, params, perm)


def save_code_table(table: CodeTable, path: PathLike) -> None:
    """Persist a code table (header, quantizer bounds, row order, packed codes)."""
    with Path(path).open("wb") as fh:
        write_code_table(fh, table)


def load_code_table(path: PathLike) -> CodeTable:
    """Load a code table written by :func:`save_code_table`."""
    path = Path(path)
    with path.open("rb") as fh:
        table = read_code_table(fh, str(path))
        binfmt.expect_eof(fh, str(path))
    return table
