"""Stencils, additive stencil models, bit accounting and the model file format."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import codec
from .matrix import SparseMatrix

MAGIC = b"ACMS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHIQQd")
_STENCIL_HEADER = struct.Struct("<IId")
_FLAG_IDS = 1


class ModelFormatError(ValueError):
    pass


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Stencil:
    """Block-constant matrix ``S[i, j] = template[row_assign[i], col_assign[j]]``."""

    template: np.ndarray
    row_assign: np.ndarray
    col_assign: np.ndarray

    def __post_init__(self):
        template = _frozen(np.atleast_2d(self.template), np.float64)
        c = _frozen(self.row_assign, np.int64)
        d = _frozen(self.col_assign, np.int64)
        k_m, k_n = template.shape
        if k_m < 1 or k_n < 1:
            raise ValueError("template must be at least 1x1")
        if c.size and (c.min() < 0 or c.max() >= k_m):
            raise ValueError("row assignment outside template bounds")
        if d.size and (d.min() < 0 or d.max() >= k_n):
            raise ValueError("column assignment outside template bounds")
        object.__setattr__(self, "template", template)
        object.__setattr__(self, "row_assign", c)
        object.__setattr__(self, "col_assign", d)

    @property
    def k_m(self) -> int:
        return self.template.shape[0]

    @property
    def k_n(self) -> int:
        return self.template.shape[1]

    @property
    def shape(self) -> tuple:
        return (self.row_assign.size, self.col_assign.size)

    def values_at(self, rows, cols) -> np.ndarray:
        return self.template[self.row_assign[rows], self.col_assign[cols]]

    def dense(self) -> np.ndarray:
        return self.template[np.ix_(self.row_assign, self.col_assign)]

    def modal_clusters(self) -> tuple[int, int]:
        """Largest row and column cluster (lowest label on ties)."""
        return (int(np.argmax(np.bincount(self.row_assign, minlength=self.k_m))),
                int(np.argmax(np.bincount(self.col_assign, minlength=self.k_n))))

    def compact(self) -> "Stencil":
        """Drop clusters with no members and relabel in increasing order."""
        used_r = np.unique(self.row_assign)
        used_c = np.unique(self.col_assign)
        if used_r.size == self.k_m and used_c.size == self.k_n:
            return self
        if used_r.size == 0:
            used_r = np.array([0])
        if used_c.size == 0:
            used_c = np.array([0])
        rmap = np.zeros(self.k_m, dtype=np.int64)
        rmap[used_r] = np.arange(used_r.size)
        cmap = np.zeros(self.k_n, dtype=np.int64)
        cmap[used_c] = np.arange(used_c.size)
        return Stencil(self.template[np.ix_(used_r, used_c)], rmap[self.row_assign],
                       cmap[self.col_assign])


@dataclass(frozen=True, eq=False)
class StencilModel:
    """Ordered sum of stencils plus noise/template variances and id maps."""

    stencils: tuple
    n_rows: int
    n_cols: int
    noise_variance: float = 1.0
    template_variances: tuple = None
    row_ids: Optional[tuple] = None
    col_ids: Optional[tuple] = None

    def __post_init__(self):
        stencils = tuple(self.stencils)
        for st in stencils:
            if st.shape != (self.n_rows, self.n_cols):
                raise ValueError(f"stencil shape {st.shape} does not match model "
                                 f"({self.n_rows}, {self.n_cols})")
        tv = self.template_variances
        tv = tuple(1.0 for _ in stencils) if tv is None else tuple(float(t) for t in tv)
        if len(tv) != len(stencils):
            raise ValueError("one template variance per stencil required")
        if not self.noise_variance > 0 or any(not t > 0 for t in tv):
            raise ValueError("variances must be positive")
        for name, ids, n in (("row_ids", self.row_ids, self.n_rows),
                             ("col_ids", self.col_ids, self.n_cols)):
            if ids is not None:
                ids = tuple(ids)
                if len(ids) != n:
                    raise ValueError(f"{name} length does not match dimensions")
                object.__setattr__(self, name, ids)
        object.__setattr__(self, "stencils", stencils)
        object.__setattr__(self, "template_variances", tv)

    @property
    def s(self) -> int:
        return len(self.stencils)

    def prefix(self, count: int) -> "StencilModel":
        return replace(self, stencils=self.stencils[:count],
                       template_variances=self.template_variances[:count])

    def external_row_ids(self) -> tuple:
        return self.row_ids if self.row_ids is not None else tuple(map(str, range(self.n_rows)))

    def external_col_ids(self) -> tuple:
        return self.col_ids if self.col_ids is not None else tuple(map(str, range(self.n_cols)))

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols))
        for st in self.stencils:
            out += st.dense()
        return out


@dataclass(frozen=True)
class BitCost:
    assignment_bits: int
    template_bits: int

    @property
    def total_bits(self) -> int:
        return self.assignment_bits + self.template_bits

    @property
    def total_bytes(self) -> float:
        return self.total_bits / 8

    @property
    def megabytes(self) -> float:
        return self.total_bits / 8e6


def evaluate(st: Stencil, i: int, j: int) -> float:
    m, n = st.shape
    if not (0 <= i < m and 0 <= j < n):
        raise IndexError(f"cell ({i}, {j}) outside {m}x{n} stencil")
    return float(st.template[st.row_assign[i], st.col_assign[j]])


def _check_cell(model: StencilModel, i: int, j: int):
    if not (0 <= i < model.n_rows and 0 <= j < model.n_cols):
        raise IndexError(f"cell ({i}, {j}) outside {model.n_rows}x{model.n_cols} model")


def predict(model: StencilModel, i: int, j: int, clamp: Optional[tuple] = None) -> float:
    _check_cell(model, i, j)
    value = 0.0
    for st in model.stencils:
        value += st.template[st.row_assign[i], st.col_assign[j]]
    if clamp is not None:
        value = min(max(value, clamp[0]), clamp[1])
    return float(value)


def predict_many(model: StencilModel, rows, cols, clamp: Optional[tuple] = None) -> np.ndarray:
    """Vectorised predictions. Index ``-1`` marks a row/column unseen by the model;
    it is predicted from each stencil's largest cluster on that side."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size and (rows.max() >= model.n_rows or rows.min() < -1):
        raise IndexError("row index out of range")
    if cols.size and (cols.max() >= model.n_cols or cols.min() < -1):
        raise IndexError("column index out of range")
    out = np.zeros(rows.shape, dtype=np.float64)
    unseen_r = rows < 0
    unseen_c = cols < 0
    for st in model.stencils:
        mr, mc = st.modal_clusters()
        ci = np.where(unseen_r, mr, st.row_assign[np.where(unseen_r, 0, rows)])
        dj = np.where(unseen_c, mc, st.col_assign[np.where(unseen_c, 0, cols)])
        out += st.template[ci, dj]
    if clamp is not None:
        np.clip(out, clamp[0], clamp[1], out=out)
    return out


def residual(m: SparseMatrix, model: StencilModel, skip: Optional[int] = None) -> SparseMatrix:
    """``M - sum of stencils`` on the observed cells, optionally leaving out stencil ``skip``."""
    if (m.n_rows, m.n_cols) != (model.n_rows, model.n_cols):
        raise ValueError(f"dimension mismatch: data {m.shape} vs model "
                         f"({model.n_rows}, {model.n_cols})")
    values = m.values.copy()
    for l, st in enumerate(model.stencils):
        if l != skip:
            values -= st.values_at(m.rows, m.cols)
    return m.with_values(values)


def block_sums(rows, cols, values, c, d, k_m: int, k_n: int):
    """Per-block observed counts and value sums, both ``k_m x k_n``."""
    block = np.asarray(c)[rows] * k_n + np.asarray(d)[cols]
    counts = np.bincount(block, minlength=k_m * k_n).reshape(k_m, k_n)
    sums = np.bincount(block, weights=values, minlength=k_m * k_n).reshape(k_m, k_n)
    return counts, sums


def refit_template(m: SparseMatrix, c, d, k_m: int, k_n: int) -> np.ndarray:
    """Block means of ``m`` under assignments (c, d); blocks without cells get 0."""
    counts, sums = block_sums(m.rows, m.cols, m.values, c, d, k_m, k_n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


def stencil_bits(m: int, n: int, k_m: int, k_n: int, bits_per_float: int = 32) -> BitCost:
    assign = math.ceil(m * math.log2(k_m)) + math.ceil(n * math.log2(k_n))
    return BitCost(assign, k_m * k_n * bits_per_float)


def bit_cost(model: StencilModel, bits_per_float: int = 32) -> BitCost:
    assign = templ = 0
    for st in model.stencils:
        bc = stencil_bits(model.n_rows, model.n_cols, st.k_m, st.k_n, bits_per_float)
        assign += bc.assignment_bits
        templ += bc.template_bits
    return BitCost(assign, templ)


def formula_bits(m: int, n: int, k: int, s: int, bits_per_float: int = 32) -> BitCost:
    """Cost of ``s`` stencils, each with ``k x k`` clusters, on an ``m x n`` matrix."""
    one = stencil_bits(m, n, k, k, bits_per_float)
    return BitCost(s * one.assignment_bits, s * one.template_bits)


def header_size(s: int) -> int:
    return _HEADER.size + s * _STENCIL_HEADER.size


def _default_ids(ids, n) -> bool:
    return ids is None or tuple(ids) == tuple(map(str, range(n)))


def serialize(model: StencilModel) -> bytes:
    has_ids = not (_default_ids(model.row_ids, model.n_rows)
                   and _default_ids(model.col_ids, model.n_cols))
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, _FLAG_IDS if has_ids else 0, model.s,
                          model.n_rows, model.n_cols, float(model.noise_variance))]
    for st, tau2 in zip(model.stencils, model.template_variances):
        parts.append(_STENCIL_HEADER.pack(st.k_m, st.k_n, float(tau2)))
    for st in model.stencils:
        parts.append(codec.pack(st.row_assign, st.k_m))
        parts.append(codec.pack(st.col_assign, st.k_n))
        parts.append(st.template.astype("<f4").tobytes())
    if has_ids:
        for ids in (model.external_row_ids(), model.external_col_ids()):
            if any("\n" in x for x in ids):
                raise ValueError("ids must not contain newlines")
            blob = "\n".join(ids).encode("utf-8")
            parts.append(struct.pack("<Q", len(blob)))
            parts.append(blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("truncated model stream")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def deserialize(data: bytes) -> StencilModel:
    data = bytes(data)
    r = _Reader(data)
    magic, version, flags, s, n_rows, n_cols, sigma2 = r.unpack(_HEADER)
    if magic != MAGIC:
        raise ModelFormatError("bad magic bytes; not a stencil model file")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    shapes = [r.unpack(_STENCIL_HEADER) for _ in range(s)]
    stencils = []
    for k_m, k_n, _ in shapes:
        if k_m < 1 or k_n < 1:
            raise ModelFormatError("cluster count must be >= 1")
        try:
            c = codec.unpack(r.take(codec.packed_nbytes(n_rows, k_m)), n_rows, k_m)
            d = codec.unpack(r.take(codec.packed_nbytes(n_cols, k_n)), n_cols, k_n)
        except ValueError as exc:
            raise ModelFormatError(str(exc)) from None
        template = np.frombuffer(r.take(4 * k_m * k_n), dtype="<f4").reshape(k_m, k_n)
        stencils.append(Stencil(template.astype(np.float64), c, d))
    row_ids = col_ids = None
    if flags & _FLAG_IDS:
        blobs = []
        for n in (n_rows, n_cols):
            (length,) = r.unpack(struct.Struct("<Q"))
            text = r.take(length).decode("utf-8")
            ids = tuple(text.split("\n")) if n else ()
            if len(ids) != n:
                raise ModelFormatError("id table length does not match dimensions")
            blobs.append(ids)
        row_ids, col_ids = blobs
    if r.pos != len(data):
        raise ModelFormatError("trailing bytes after model")
    return StencilModel(tuple(stencils), n_rows, n_cols, sigma2,
                        tuple(t for _, _, t in shapes), row_ids, col_ids)


def save_model(model: StencilModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load_model(path) -> StencilModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
