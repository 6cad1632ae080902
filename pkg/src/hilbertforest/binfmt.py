"""
Fixed 16-byte headers shared by every on-disk format

A header is four little-endian 32-bit unsigned integers:
magic, version, width, count. For vector files ``width`` is the dimension,
for result and graph files it is the row length (k).
"""

import io
import struct
from typing import BinaryIO, Optional, Tuple

import numpy as np

from .errors import DatasetFormatError

HEADER = struct.Struct("<4sIII")
FORMAT_VERSION = 1
UINT32_MAX = 0xFFFFFFFF

MAGIC_VECTORS = b"HFVC"
MAGIC_RESULTS = b"HFRS"
MAGIC_GRAPH = b"HFGR"
MAGIC_FOREST = b"HFFO"
MAGIC_CODES = b"HFCT"
MAGIC_INDEX = b"HFIX"


def write_header(fh: BinaryIO, magic: bytes, width: int, count: int) -> None:
    """Write a version-1 header."""
    if not (0 <= width <= UINT32_MAX and 0 <= count <= UINT32_MAX):
        raise DatasetFormatError(
            f"Header fields out of 32-bit range: width={width}, count={count}"
        )
    fh.write(HEADER.pack(magic, FORMAT_VERSION, width, count))


def read_header(fh: BinaryIO, magic: bytes, source: str = "<stream>") -> Tuple[int, int]:
    """
    Read and check a header.

    Args:
        fh: Binary stream positioned at the header
        magic: Expected 4-byte magic
        source: Name used in error messages

    Returns:
        Tuple of (width, count)

    Raises:
        DatasetFormatError: On short header, wrong magic or unknown version
    """
    raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise DatasetFormatError(
            f"Malformed header in {source}: expected {HEADER.size} bytes, got {len(raw)}"
        )
    found, version, width, count = HEADER.unpack(raw)
    if found != magic:
        raise DatasetFormatError(
            f"Malformed header in {source}: magic {found!r} does not match {magic!r}"
        )
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"Unsupported format version {version} in {source} (expected {FORMAT_VERSION})"
        )
    return width, count


def remaining_bytes(fh: BinaryIO) -> Optional[int]:
    """Bytes between the current position and the end, or None if unseekable."""
    try:
        if not fh.seekable():
            return None
        here = fh.tell()
        end = fh.seek(0, io.SEEK_END)
        fh.seek(here)
    except (AttributeError, OSError):
        return None
    return end - here


def read_array(
    fh: BinaryIO, dtype: str, count: int, source: str = "<stream>"
) -> np.ndarray:
    """Read exactly ``count`` items of ``dtype`` or raise on truncation."""
    dt = np.dtype(dtype)
    nbytes = count * dt.itemsize
    left = remaining_bytes(fh)
    if left is not None and nbytes > left:
        raise DatasetFormatError(
            f"Truncated payload in {source}: expected {nbytes} bytes, got {left}"
        )
    raw = fh.read(nbytes)
    if len(raw) < nbytes:
        raise DatasetFormatError(
            f"Truncated payload in {source}: expected {nbytes} bytes, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dt, count=count).copy()


def write_array(fh: BinaryIO, array: np.ndarray, dtype: str) -> None:
    """Write ``array`` in row-major order as ``dtype``."""
    fh.write(np.ascontiguousarray(array, dtype=np.dtype(dtype)).tobytes())


def expect_eof(fh: BinaryIO, source: str = "<stream>") -> None:
    """Raise if trailing bytes follow the declared payload."""
    if fh.read(1):
        raise DatasetFormatError(f"Trailing bytes after declared payload in {source}")
