"""
Matrix Store - File-backed column-major matrices accessed by memory-mapping
Creation, sidecar metadata, blocked column traversal and in-memory adapters
"""

import os
import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from itertools import islice
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CorruptMatrixError, MatrixStoreError, ReadOnlyMatrixError

logger = logging.getLogger(__name__)

MISSING_SENTINEL = 255
DEFAULT_BLOCK_WIDTH = 1024

# Sidecar list sections, in the order they are written
LIST_SECTIONS = (
    "col_names",
    "row_ids",
    "centers",
    "scales",
    "penalty_factor",
    "dropped_features",
    "eigenvalues",
)


class ElementKind(str, Enum):
    UINT8 = "uint8"
    FLOAT64 = "float64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype("u1") if self is ElementKind.UINT8 else np.dtype("<f8")

    @property
    def width(self) -> int:
        return self.dtype.itemsize


def sidecar_path(path: str) -> str:
    """`foo.bk` -> `foo.meta`"""
    root, _ = os.path.splitext(path)
    return root + ".meta"


class ColumnSource:
    """
    Anything that serves float64 column blocks

    Subclasses provide n_rows, n_cols, col_names and read_col_block; traversal
    helpers are shared.
    """

    n_rows: int
    n_cols: int
    col_names: List[str]

    def read_col_block(self, first_col: int, n_block_cols: int, rows=None) -> np.ndarray:
        raise NotImplementedError

    def read_cols(self, cols: Sequence[int], rows=None) -> np.ndarray:
        """Gather arbitrary columns into a Fortran-ordered float64 array"""
        cols = np.asarray(cols, dtype=np.int64)
        n = self.n_rows if rows is None else len(rows)
        out = np.empty((n, len(cols)), dtype=np.float64, order="F")
        if len(cols) == 0:
            return out
        # contiguous runs are read as one block
        breaks = np.flatnonzero(np.diff(cols) != 1) + 1
        start = 0
        for run in np.split(cols, breaks):
            out[:, start:start + len(run)] = self.read_col_block(int(run[0]), len(run), rows=rows)
            start += len(run)
        return out

    def iter_col_blocks(self, block_width: Optional[int] = None, rows=None) -> Iterator[Tuple[int, np.ndarray]]:
        """Yield (first_col, block) over the whole matrix"""
        width = block_width or DEFAULT_BLOCK_WIDTH
        for first in range(0, self.n_cols, width):
            k = min(width, self.n_cols - first)
            yield first, self.read_col_block(first, k, rows=rows)

    def _check_range(self, first_col: int, n_block_cols: int) -> None:
        if first_col < 0 or n_block_cols < 0 or first_col + n_block_cols > self.n_cols:
            raise MatrixStoreError(
                f"Column block [{first_col}, {first_col + n_block_cols}) outside 0..{self.n_cols}"
            )


class FileMatrix(ColumnSource):
    """Handle to an on-disk column-major matrix; never fully resident"""

    def __init__(self,
                 path: str,
                 n_rows: int,
                 n_cols: int,
                 element_kind: ElementKind,
                 col_names: Optional[List[str]] = None,
                 row_ids: Optional[List[str]] = None,
                 mode: str = "r",
                 extra: Optional[Dict[str, str]] = None,
                 sections: Optional[Dict[str, List[str]]] = None):
        self.path = os.path.abspath(path)
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.element_kind = ElementKind(element_kind)
        self.col_names = list(col_names) if col_names is not None else [f"V{j + 1}" for j in range(self.n_cols)]
        self.row_ids = list(row_ids) if row_ids is not None else [str(i + 1) for i in range(self.n_rows)]
        self.mode = mode
        self.extra = dict(extra or {})
        self.sections = dict(sections or {})

    @property
    def meta_path(self) -> str:
        return sidecar_path(self.path)

    @property
    def missing_sentinel(self) -> Optional[int]:
        return MISSING_SENTINEL if self.element_kind is ElementKind.UINT8 else None

    @property
    def nbytes(self) -> int:
        return self.n_rows * self.n_cols * self.element_kind.width

    def __repr__(self) -> str:
        return f"FileMatrix({self.path!r}, {self.n_rows}x{self.n_cols}, {self.element_kind.value})"

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def _map(self, mode: str = "r") -> np.memmap:
        return np.memmap(self.path, dtype=self.element_kind.dtype, mode=mode,
                         shape=(self.n_rows, self.n_cols), order="F")

    def read_raw_block(self, first_col: int, n_block_cols: int, rows=None) -> np.ndarray:
        """Copy a block in its stored dtype (uint8 dosages stay uint8)"""
        self._check_range(first_col, n_block_cols)
        mm = self._map()
        try:
            view = mm[:, first_col:first_col + n_block_cols]
            block = np.array(view if rows is None else view[rows], order="F")
        finally:
            del mm
        return block

    def read_col_block(self, first_col: int, n_block_cols: int, rows=None) -> np.ndarray:
        raw = self.read_raw_block(first_col, n_block_cols, rows=rows)
        if self.element_kind is ElementKind.FLOAT64:
            return raw
        block = raw.astype(np.float64)
        block[raw == MISSING_SENTINEL] = np.nan
        return block

    def write_col_block(self, first_col: int, block: np.ndarray) -> None:
        if self.mode == "r":
            raise ReadOnlyMatrixError(f"{self.path} is opened read-only")
        block = np.asarray(block)
        if block.ndim == 1:
            block = block.reshape(-1, 1)
        if block.shape[0] != self.n_rows:
            raise MatrixStoreError(
                f"Block has {block.shape[0]} rows, matrix has {self.n_rows}"
            )
        self._check_range(first_col, block.shape[1])
        if self.element_kind is ElementKind.UINT8:
            bad = ~np.isin(block, (0, 1, 2, MISSING_SENTINEL))
            if np.any(bad):
                raise MatrixStoreError("uint8 dosage blocks may only hold 0, 1, 2 or the missing sentinel")
        mm = self._map("r+")
        try:
            mm[:, first_col:first_col + block.shape[1]] = block
            mm.flush()
        finally:
            del mm

    def write_row_block(self, first_row: int, block: np.ndarray) -> None:
        """Write full rows (used when the input arrives row by row)"""
        if self.mode == "r":
            raise ReadOnlyMatrixError(f"{self.path} is opened read-only")
        block = np.asarray(block)
        if block.ndim != 2 or block.shape[1] != self.n_cols:
            raise MatrixStoreError(f"Row block must have {self.n_cols} columns")
        if first_row < 0 or first_row + block.shape[0] > self.n_rows:
            raise MatrixStoreError(
                f"Row block [{first_row}, {first_row + block.shape[0]}) outside 0..{self.n_rows}"
            )
        mm = self._map("r+")
        try:
            mm[first_row:first_row + block.shape[0], :] = block
            mm.flush()
        finally:
            del mm

    def write_meta(self) -> None:
        """Write the `.meta` sidecar"""
        lines = [
            f"n_rows:{self.n_rows}",
            f"n_cols:{self.n_cols}",
            f"kind:{self.element_kind.value}",
        ]
        lines += [f"{key}:{value}" for key, value in self.extra.items()]
        sections = {"col_names": self.col_names, "row_ids": self.row_ids}
        sections.update(self.sections)
        for name in LIST_SECTIONS:
            if name in sections:
                lines.append(f"{name}:")
                lines.extend(str(v) for v in sections[name])
        with open(self.meta_path, 'w', encoding='utf-8') as f:
            f.write("\n".join(lines) + "\n")


def _parse_meta(meta_path: str) -> Tuple[Dict[str, str], Dict[str, List[str]]]:
    scalars: Dict[str, str] = {}
    sections: Dict[str, List[str]] = {}
    current: Optional[str] = None
    with open(meta_path, 'r', encoding='utf-8') as f:
        for raw in f:
            line = raw.rstrip("\n")
            header = line[:-1] if line.endswith(":") else None
            if header in LIST_SECTIONS:
                current = header
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
            elif line:
                key, sep, value = line.partition(":")
                if not sep:
                    raise CorruptMatrixError(f"Malformed sidecar line in {meta_path}: {line!r}")
                scalars[key] = value
    return scalars, sections


def create_matrix(path: str,
                  n_rows: int,
                  n_cols: int,
                  element_kind,
                  col_names: Optional[List[str]] = None,
                  row_ids: Optional[List[str]] = None,
                  overwrite: bool = False,
                  extra: Optional[Dict[str, str]] = None,
                  sections: Optional[Dict[str, List[str]]] = None) -> FileMatrix:
    """
    Create a zero-filled backing file plus sidecar

    Args:
        path: Backing file path (sidecar goes next to it with extension .meta)
        n_rows, n_cols: Dimensions, both >= 1
        element_kind: "uint8" (dosages) or "float64"
        overwrite: Replace an existing file instead of refusing

    Returns:
        Writable FileMatrix handle
    """
    if n_rows < 1 or n_cols < 1:
        raise MatrixStoreError(f"Matrix dimensions must be positive, got {n_rows}x{n_cols}")
    if os.path.exists(path) and not overwrite:
        raise MatrixStoreError(f"{path} already exists; pass overwrite=True to replace it")

    m = FileMatrix(path, n_rows, n_cols, element_kind, col_names, row_ids,
                   mode="r+", extra=extra, sections=sections)
    if len(m.col_names) != m.n_cols or len(m.row_ids) != m.n_rows:
        raise MatrixStoreError("col_names/row_ids lengths do not match the dimensions")

    directory = os.path.dirname(m.path)
    os.makedirs(directory, exist_ok=True)
    try:
        with open(m.path, 'wb') as f:
            f.truncate(m.nbytes)
        m.write_meta()
    except OSError as e:
        raise MatrixStoreError(f"Could not create {path}: {e}") from e

    logger.debug(f"Created {m!r}")
    return m


def open_matrix(path: str, mode: str = "r") -> FileMatrix:
    """
    Open an existing matrix without reading any column data

    Args:
        path: Backing file path
        mode: "r" (read-only) or "r+" (writable)
    """
    if mode not in ("r", "r+"):
        raise MatrixStoreError(f"Unsupported mode {mode!r}")
    meta_path = sidecar_path(path)
    for required in (path, meta_path):
        if not os.path.exists(required):
            raise MatrixStoreError(f"Missing file: {required}")

    scalars, sections = _parse_meta(meta_path)
    try:
        n_rows = int(scalars.pop("n_rows"))
        n_cols = int(scalars.pop("n_cols"))
        kind = ElementKind(scalars.pop("kind"))
    except (KeyError, ValueError) as e:
        raise CorruptMatrixError(f"Sidecar {meta_path} lacks valid dimensions/kind: {e}") from e

    expected = n_rows * n_cols * kind.width
    actual = os.path.getsize(path)
    if actual != expected:
        raise CorruptMatrixError(
            f"{path} is {actual} bytes but sidecar describes {n_rows}x{n_cols} {kind.value} ({expected} bytes)"
        )

    col_names = sections.pop("col_names", None)
    row_ids = sections.pop("row_ids", None)
    if col_names is not None and len(col_names) != n_cols:
        raise CorruptMatrixError(f"{meta_path} lists {len(col_names)} column names for {n_cols} columns")
    if row_ids is not None and len(row_ids) != n_rows:
        raise CorruptMatrixError(f"{meta_path} lists {len(row_ids)} row ids for {n_rows} rows")

    return FileMatrix(path, n_rows, n_cols, kind, col_names, row_ids,
                      mode=mode, extra=scalars, sections=sections)


def remove_matrix(path: str) -> None:
    """Delete a backing file and its sidecar if present"""
    for target in (path, sidecar_path(path)):
        if os.path.exists(target):
            os.remove(target)


class ArrayColumns(ColumnSource):
    """In-memory matrix served through the ColumnSource interface"""

    def __init__(self, array, col_names: Optional[List[str]] = None):
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 1:
            array = array.reshape(-1, 1)
        self.array = np.asfortranarray(array)
        self.n_rows, self.n_cols = self.array.shape
        self.col_names = list(col_names) if col_names is not None else [f"V{j + 1}" for j in range(self.n_cols)]

    def read_col_block(self, first_col: int, n_block_cols: int, rows=None) -> np.ndarray:
        self._check_range(first_col, n_block_cols)
        block = self.array[:, first_col:first_col + n_block_cols]
        return np.array(block if rows is None else block[rows], order="F")


def import_array(array,
                 path: str,
                 col_names: Optional[List[str]] = None,
                 row_ids: Optional[List[str]] = None,
                 overwrite: bool = False,
                 block_width: Optional[int] = None) -> FileMatrix:
    """Write an in-memory matrix (or DataFrame) to a float64 store"""
    if hasattr(array, "columns") and col_names is None:
        col_names = [str(c) for c in array.columns]
    source = ArrayColumns(np.asarray(array, dtype=np.float64), col_names)
    m = create_matrix(path, source.n_rows, source.n_cols, ElementKind.FLOAT64,
                      source.col_names, row_ids, overwrite=overwrite)
    for first, block in source.iter_col_blocks(block_width):
        m.write_col_block(first, block)
    return m


def map_blocks(fn: Callable[[int, np.ndarray], object],
               source: ColumnSource,
               block_width: Optional[int] = None,
               threads: int = 1,
               rows=None) -> Iterator[object]:
    """
    Apply fn(first_col, block) to every column block

    Results come back in block order. With threads > 1 at most `threads`
    blocks are in flight, so memory stays O(threads * n * block_width).
    """
    width = block_width or DEFAULT_BLOCK_WIDTH
    starts = list(range(0, source.n_cols, width))

    def task(first: int):
        k = min(width, source.n_cols - first)
        return fn(first, source.read_col_block(first, k, rows=rows))

    if threads <= 1:
        for first in starts:
            yield task(first)
        return

    pending = iter(starts)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        while True:
            window = list(islice(pending, threads))
            if not window:
                break
            for result in pool.map(task, window):
                yield result
