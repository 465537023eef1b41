"""Sparse/dense matrix containers, text loaders and train/test splitting."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence, Union

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent input data."""


Source = Union[str, bytes, IO]


def _read_text(source: Source) -> str:
    data = source if isinstance(source, (str, bytes)) else source.read()
    if isinstance(data, bytes):
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"input is not UTF-8 text: {exc.reason}") from None
    return data


def _default_ids(n: int) -> tuple:
    return tuple(str(i) for i in range(n))


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Observed entries of an ``n_rows x n_cols`` real matrix as (row, col, value) triples.

    ``row_ids``/``col_ids`` map dense indices back to external ids; index ``i``
    has external id ``row_ids[i]``.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    row_ids: tuple = None
    col_ids: tuple = None

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.int64)
        cols = np.ascontiguousarray(self.cols, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if not (rows.shape == cols.shape == values.shape) or rows.ndim != 1:
            raise DataError("rows, cols and values must be 1-d arrays of equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= self.n_rows:
                raise DataError("row index out of range")
            if cols.min() < 0 or cols.max() >= self.n_cols:
                raise DataError("column index out of range")
            if not np.all(np.isfinite(values)):
                raise DataError("non-finite value")
            keys = rows * self.n_cols + cols
            if np.unique(keys).size != keys.size:
                raise DataError("duplicate cell")
        row_ids = _default_ids(self.n_rows) if self.row_ids is None else tuple(self.row_ids)
        col_ids = _default_ids(self.n_cols) if self.col_ids is None else tuple(self.col_ids)
        if len(row_ids) != self.n_rows or len(col_ids) != self.n_cols:
            raise DataError("id maps do not match matrix dimensions")
        for arr in (rows, cols, values):
            arr.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_ids", row_ids)
        object.__setattr__(self, "col_ids", col_ids)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def shape(self) -> tuple:
        return (self.n_rows, self.n_cols)

    def entries(self) -> list:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    def with_values(self, values) -> "SparseMatrix":
        """Same sparsity pattern and ids, new values."""
        return SparseMatrix(self.n_rows, self.n_cols, self.rows, self.cols, values,
                            self.row_ids, self.col_ids)

    def take(self, idx) -> "SparseMatrix":
        """Sub-matrix holding the entries at positions ``idx`` (dims and ids kept)."""
        idx = np.asarray(idx)
        return SparseMatrix(self.n_rows, self.n_cols, self.rows[idx], self.cols[idx],
                            self.values[idx], self.row_ids, self.col_ids)

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix(self.n_cols, self.n_rows, self.cols, self.rows, self.values,
                            self.col_ids, self.row_ids)

    def to_dense(self, fill: float = np.nan) -> np.ndarray:
        out = np.full((self.n_rows, self.n_cols), fill, dtype=np.float64)
        out[self.rows, self.cols] = self.values
        return out

    def to_scipy(self):
        import scipy.sparse as sp

        return sp.csr_matrix((self.values, (self.rows, self.cols)), shape=self.shape)

    def row_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_rows)

    def col_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_cols)

    @classmethod
    def from_dense(cls, values, mask=None, row_ids=None, col_ids=None) -> "SparseMatrix":
        """Build from a 2-d array; cells where ``mask`` is False (default: NaN) are unobserved."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError("expected a 2-d array")
        if mask is None:
            mask = ~np.isnan(values)
        rows, cols = np.nonzero(mask)
        return cls(values.shape[0], values.shape[1], rows, cols, values[rows, cols],
                   row_ids, col_ids)

    def write_triples(self, fh: IO[str], delimiter: str = "\t") -> None:
        """Write one ``row<delim>col<delim>value`` line per entry using external ids."""
        rid, cid = self.row_ids, self.col_ids
        for r, c, v in zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()):
            fh.write(f"{rid[r]}{delimiter}{cid[c]}{delimiter}{v!r}\n")

    def to_triples_text(self, delimiter: str = "\t") -> str:
        buf = io.StringIO()
        self.write_triples(buf, delimiter)
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class DenseMatrix:
    n_rows: int
    n_cols: int
    values: np.ndarray  # row-major, length n_rows * n_cols

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        if values.size != self.n_rows * self.n_cols:
            raise DataError("values length does not match dimensions")
        if not np.all(np.isfinite(values)):
            raise DataError("non-finite value")
        object.__setattr__(self, "values", values)

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.n_rows, self.n_cols)

    def to_sparse(self) -> SparseMatrix:
        return SparseMatrix.from_dense(self.as_array(), mask=np.ones((self.n_rows, self.n_cols), bool))


@dataclass(frozen=True, eq=False)
class DualIndex:
    """Row-major and column-major views of the same entries (CSR + CSC).

    ``row_entries[row_ptr[i]:row_ptr[i+1]]`` are positions (into the matrix's
    entry arrays) of row ``i``'s cells, sorted by column; ``col_entries``
    likewise per column, sorted by row.
    """

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    row_entries: np.ndarray
    col_ptr: np.ndarray
    col_entries: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def row(self, i: int) -> list:
        e = self.row_entries[self.row_ptr[i]:self.row_ptr[i + 1]]
        return list(zip(self.cols[e].tolist(), self.values[e].tolist()))

    def col(self, j: int) -> list:
        e = self.col_entries[self.col_ptr[j]:self.col_ptr[j + 1]]
        return list(zip(self.rows[e].tolist(), self.values[e].tolist()))

    @property
    def by_row(self) -> list:
        return [self.row(i) for i in range(self.n_rows)]

    @property
    def by_col(self) -> list:
        return [self.col(j) for j in range(self.n_cols)]


def build_dual_index(m: SparseMatrix) -> DualIndex:
    row_entries = np.lexsort((m.cols, m.rows))
    col_entries = np.lexsort((m.rows, m.cols))
    row_ptr = np.zeros(m.n_rows + 1, dtype=np.int64)
    np.cumsum(m.row_counts(), out=row_ptr[1:])
    col_ptr = np.zeros(m.n_cols + 1, dtype=np.int64)
    np.cumsum(m.col_counts(), out=col_ptr[1:])
    return DualIndex(m.n_rows, m.n_cols, row_ptr, row_entries.astype(np.int64), col_ptr,
                     col_entries.astype(np.int64), m.rows, m.cols, m.values)


def parse_triples(lines: Iterable[str], delimiter: Optional[str] = "\t",
                  row_ids: Sequence[str] = (), col_ids: Sequence[str] = ()) -> SparseMatrix:
    """Parse ``row<delim>col<delim>value`` lines.

    ``row_ids``/``col_ids`` pre-seed the id maps (new ids are appended in
    first-seen order). ``delimiter=None`` splits on any whitespace.
    """
    row_map = {rid: i for i, rid in enumerate(row_ids)}
    col_map = {cid: j for j, cid in enumerate(col_ids)}
    rows, cols, values = [], [], []
    seen = set()
    for lineno, line in enumerate(lines, 1):
        line = line.strip("\r\n")
        if not line.strip():
            continue
        parts = line.split(delimiter) if delimiter is not None else line.split()
        if len(parts) < 3:
            raise DataError(f"line {lineno}: expected row, col, value; got {line!r}")
        rid, cid, raw = parts[0].strip(), parts[1].strip(), parts[2].strip()
        try:
            value = float(raw)
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric value {raw!r}") from None
        if not math.isfinite(value):
            raise DataError(f"line {lineno}: non-finite value {raw!r}")
        i = row_map.setdefault(rid, len(row_map))
        j = col_map.setdefault(cid, len(col_map))
        if (i, j) in seen:
            raise DataError(f"line {lineno}: duplicate cell ({rid}, {cid})")
        seen.add((i, j))
        rows.append(i)
        cols.append(j)
        values.append(value)
    if not values:
        raise DataError("no entries")
    return SparseMatrix(len(row_map), len(col_map), np.array(rows), np.array(cols),
                        np.array(values), tuple(row_map), tuple(col_map))


def load_triples(source: Source, delimiter: Optional[str] = "\t") -> SparseMatrix:
    """Load a triple file; ids are re-indexed densely in first-seen order."""
    return parse_triples(_read_text(source).splitlines(), delimiter)


def load_dense(source: Source) -> DenseMatrix:
    rows = []
    for lineno, line in enumerate(_read_text(source).splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric token") from None
        if len(rows[-1]) != len(rows[0]):
            raise DataError(f"line {lineno}: ragged row ({len(rows[-1])} != {len(rows[0])} values)")
    if not rows:
        raise DataError("no entries")
    arr = np.array(rows, dtype=np.float64)
    return DenseMatrix(arr.shape[0], arr.shape[1], arr.ravel())


def split_train_test(m: SparseMatrix, test_fraction: float, seed: int):
    """Random disjoint split of the observed entries; |test| = round(E * fraction)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if m.nnz < 2:
        raise DataError("need at least 2 entries to split")
    n_test = int(round(m.nnz * test_fraction))
    perm = np.random.default_rng(seed).permutation(m.nnz)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return m.take(train_idx), m.take(test_idx)
