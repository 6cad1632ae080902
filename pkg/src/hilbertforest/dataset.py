"""
Vector datasets, result sets and their binary file formats
"""

import logging
from pathlib import Path
from typing import BinaryIO, Optional, Sequence, Union

import numpy as np

from . import binfmt
from .errors import DatasetFormatError, DimensionMismatchError, ParameterError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

#: Id used to right-pad result rows whose candidate pool ran short.
MISSING_ID = -1


class VectorDataset:
    """
    Immutable collection of ``count`` float32 vectors of dimension ``dim``.

    Row ``i`` holds the vector with id ``i``. The array is marked read-only so a
    dataset can be shared between threads without copying.
    """

    def __init__(self, data: np.ndarray, dim: Optional[int] = None):
        array = np.ascontiguousarray(data, dtype=np.float32)
        if array.ndim == 1 and array.size == 0 and dim is not None:
            array = array.reshape(0, dim)
        if array.ndim != 2:
            raise DimensionMismatchError(
                f"Vector data must be two-dimensional (count, dim), got shape {array.shape}"
            )
        if dim is not None and array.shape[1] != dim:
            raise DimensionMismatchError(
                f"Declared dimension {dim} does not match data width {array.shape[1]}"
            )
        if array.shape[1] < 1:
            raise DimensionMismatchError("Vector dimension must be positive")
        _check_finite(array)
        array.setflags(write=False)
        self._data = array

    @classmethod
    def from_array(cls, array, dim: Optional[int] = None) -> "VectorDataset":
        """Validate and wrap an in-memory array (copied to float32 if needed)."""
        return cls(np.array(array, dtype=np.float32, copy=True), dim=dim)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dim(self) -> int:
        return self._data.shape[1]

    @property
    def count(self) -> int:
        return self._data.shape[0]

    def __len__(self) -> int:
        return self.count

    def take(self, ids: Sequence[int]) -> "VectorDataset":
        """Return the rows ``ids`` as a new dataset (ids are renumbered 0..len-1)."""
        return VectorDataset(self._data[np.asarray(ids, dtype=np.int64)], dim=self.dim)

    def check_dim(self, dim: int, what: str = "queries") -> None:
        """Raise DimensionMismatchError unless ``dim`` equals this dataset's."""
        if dim != self.dim:
            raise DimensionMismatchError(
                f"Dimension mismatch: {what} have dim {dim}, dataset has dim {self.dim}"
            )

    def __eq__(self, other) -> bool:
        if not isinstance(other, VectorDataset):
            return NotImplemented
        return self._data.shape == other._data.shape and self._data.tobytes() == other._data.tobytes()

    def __repr__(self) -> str:
        return f"VectorDataset(count={self.count}, dim={self.dim})"


class ResultSet:
    """
    Per-query neighbor ids, ``query_count`` rows of width ``k``.

    Rows are sorted by ascending distance with ascending-id tie-break. A row may
    end in :data:`MISSING_ID` padding when fewer than ``k`` candidates existed.
    """

    def __init__(self, ids: np.ndarray, k: Optional[int] = None):
        array = np.ascontiguousarray(ids, dtype=np.int64)
        if array.ndim == 1 and array.size == 0 and k is not None:
            array = array.reshape(0, k)
        if array.ndim != 2:
            raise DatasetFormatError(
                f"Result ids must be two-dimensional (queries, k), got shape {array.shape}"
            )
        if k is not None and array.shape[1] != k:
            raise DatasetFormatError(f"Declared k={k} does not match row width {array.shape[1]}")
        if array.shape[1] < 1:
            raise ParameterError("Result width k must be positive")
        array.setflags(write=False)
        self._ids = array

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    @property
    def k(self) -> int:
        return self._ids.shape[1]

    @property
    def query_count(self) -> int:
        return self._ids.shape[0]

    def row(self, i: int) -> np.ndarray:
        """Ids of query ``i`` without trailing padding."""
        r = self._ids[i]
        return r[r != MISSING_ID]

    def validate(self, count: Optional[int] = None) -> None:
        """
        Check row invariants.

        Args:
            count: Size of the referenced dataset; ids must lie in [0, count)

        Raises:
            DatasetFormatError: On out-of-range ids, duplicates, or padding that
                is followed by a real id
        """
        ids = self._ids
        if ids.size == 0:
            return
        missing = ids == MISSING_ID
        if ((ids < 0) & ~missing).any():
            row = int(np.nonzero(((ids < 0) & ~missing).any(axis=1))[0][0])
            raise DatasetFormatError(f"Negative id in result row {row}")
        if count is not None and (ids >= count).any():
            row = int(np.nonzero((ids >= count).any(axis=1))[0][0])
            raise DatasetFormatError(
                f"Result row {row} holds an id outside [0, {count})"
            )
        # padding must be a suffix
        if (missing[:, :-1] & ~missing[:, 1:]).any():
            row = int(np.nonzero((missing[:, :-1] & ~missing[:, 1:]).any(axis=1))[0][0])
            raise DatasetFormatError(f"Padding precedes a real id in result row {row}")
        ordered = np.sort(np.where(missing, np.iinfo(np.int64).max, ids), axis=1)
        dup = (ordered[:, 1:] == ordered[:, :-1]) & (ordered[:, 1:] != np.iinfo(np.int64).max)
        if dup.any():
            row = int(np.nonzero(dup.any(axis=1))[0][0])
            raise DatasetFormatError(f"Duplicate id in result row {row}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResultSet):
            return NotImplemented
        return self._ids.shape == other._ids.shape and bool(np.array_equal(self._ids, other._ids))

    def __repr__(self) -> str:
        return f"ResultSet(query_count={self.query_count}, k={self.k})"


def mean_overlap(a: np.ndarray, b: np.ndarray, k: int) -> float:
    """
    Mean over rows of ``|a[i, :k] ∩ b[i, :k]| / k``.

    Rows must be duplicate-free; :data:`MISSING_ID` entries never match.
    """
    a = np.asarray(a, dtype=np.int64)[:, :k]
    b = np.asarray(b, dtype=np.int64)[:, :k]
    if a.shape[0] == 0:
        return 0.0
    hits = 0
    for lo in range(0, a.shape[0], 4096):
        ra, rb = a[lo : lo + 4096], b[lo : lo + 4096]
        same = (ra[:, :, None] == rb[:, None, :]) & (ra[:, :, None] != MISSING_ID)
        hits += int(same.sum())
    return hits / (a.shape[0] * k)


def _check_finite(array: np.ndarray) -> None:
    if array.size == 0:
        return
    bad = ~np.isfinite(array).all(axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        raise DatasetFormatError(f"Non-finite coordinate in row {row}")


def write_vectors(fh: BinaryIO, ds: VectorDataset) -> None:
    """Write ``ds`` to an open binary stream."""
    binfmt.write_header(fh, binfmt.MAGIC_VECTORS, ds.dim, ds.count)
    binfmt.write_array(fh, ds.data, "<f4")


def read_vectors(fh: BinaryIO, source: str = "<stream>") -> VectorDataset:
    """Read a dataset from an open binary stream."""
    dim, count = binfmt.read_header(fh, binfmt.MAGIC_VECTORS, source)
    if dim < 1:
        raise DatasetFormatError(f"Malformed header in {source}: dimension must be positive")
    payload = binfmt.read_array(fh, "<f4", dim * count, source)
    array = payload.astype(np.float32).reshape(count, dim)
    try:
        return VectorDataset(array, dim=dim)
    except DatasetFormatError as exc:
        raise DatasetFormatError(f"{exc} of {source}") from None


def load_vectors(path: PathLike) -> VectorDataset:
    """
    Load a vector file.

    Args:
        path: File written by :func:`save_vectors`

    Returns:
        VectorDataset with the declared dim/count

    Raises:
        DatasetFormatError: Malformed header, truncated payload, trailing bytes,
            or a non-finite coordinate (the message names the row)
    """
    path = Path(path)
    with path.open("rb") as fh:
        ds = read_vectors(fh, str(path))
        binfmt.expect_eof(fh, str(path))
    logger.debug("Loaded %d vectors of dim %d from %s", ds.count, ds.dim, path)
    return ds


def save_vectors(ds: VectorDataset, path: PathLike) -> None:
    """Persist ``ds`` in the vector file format."""
    with Path(path).open("wb") as fh:
        write_vectors(fh, ds)


def write_results(fh: BinaryIO, rs: ResultSet, magic: bytes = binfmt.MAGIC_RESULTS) -> None:
    """Write a result set (padding stored as 0xFFFFFFFF)."""
    binfmt.write_header(fh, magic, rs.k, rs.query_count)
    stored = np.where(rs.ids == MISSING_ID, binfmt.UINT32_MAX, rs.ids)
    binfmt.write_array(fh, stored, "<u4")


def read_results(
    fh: BinaryIO, source: str = "<stream>", magic: bytes = binfmt.MAGIC_RESULTS
) -> ResultSet:
    """Read a result set from an open binary stream."""
    k, count = binfmt.read_header(fh, magic, source)
    if k < 1:
        raise DatasetFormatError(f"Malformed header in {source}: k must be positive")
    raw = binfmt.read_array(fh, "<u4", k * count, source).astype(np.int64)
    raw[raw == binfmt.UINT32_MAX] = MISSING_ID
    rs = ResultSet(raw.reshape(count, k), k=k)
    rs.validate()
    return rs


def save_results(rs: ResultSet, path: PathLike) -> None:
    """
    Persist a result set.

    Raises:
        DatasetFormatError: If ``rs`` violates its row invariants
    """
    rs.validate()
    with Path(path).open("wb") as fh:
        write_results(fh, rs)


def load_results(path: PathLike, count: Optional[int] = None) -> ResultSet:
    """
    Load a result or ground-truth file.

    Args:
        path: File written by :func:`save_results`
        count: Optional dataset size for the id-range check
    """
    path = Path(path)
    with path.open("rb") as fh:
        rs = read_results(fh, str(path))
        binfmt.expect_eof(fh, str(path))
    if count is not None:
        rs.validate(count)
    return rs
