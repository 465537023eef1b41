"""Held-out RMSE and model-size versus accuracy curves."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .matrix import DataError, SparseMatrix
from .sampler import SampleSet
from .stencil import StencilModel, bit_cost, predict_many

CURVE_COLUMNS = ("stencils", "bits", "bytes", "train_rmse", "test_rmse")


@dataclass
class EvalReport:
    rmse: float
    n_test: int
    curve: list = field(default_factory=list)  # (stencils, bits, bytes, train_rmse, test_rmse)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for s, bits, nbytes, tr, te in self.curve:
            w.writerow([s, bits, nbytes, f"{tr:.6f}", f"{te:.6f}"])
        return buf.getvalue()


def _map_ids(ids, model_ids) -> np.ndarray:
    if tuple(ids) == tuple(model_ids):
        return np.arange(len(ids))
    lookup = {x: i for i, x in enumerate(model_ids)}
    return np.array([lookup.get(x, -1) for x in ids], dtype=np.int64)


def aligned_cells(model: StencilModel, data: SparseMatrix):
    """Row/col indices of ``data``'s entries in the model's index space (-1 = unseen id)."""
    rmap = _map_ids(data.row_ids, model.external_row_ids())
    cmap = _map_ids(data.col_ids, model.external_col_ids())
    return rmap[data.rows], cmap[data.cols]


def predictions(model: Union[StencilModel, SampleSet], data: SparseMatrix,
                clamp: Optional[tuple] = None) -> np.ndarray:
    ref = model.models[0] if isinstance(model, SampleSet) else model
    rows, cols = aligned_cells(ref, data)
    if isinstance(model, SampleSet):
        return model.predict(rows, cols, clamp)
    return predict_many(model, rows, cols, clamp)


def rmse(model: Union[StencilModel, SampleSet], test: SparseMatrix,
         clamp: Optional[tuple] = None) -> float:
    if test.nnz == 0:
        raise DataError("empty test set")
    err = test.values - predictions(model, test, clamp)
    return float(np.sqrt(np.mean(err * err)))


def size_accuracy_curve(model: StencilModel, train: SparseMatrix, test: SparseMatrix,
                        clamp: Optional[tuple] = None) -> EvalReport:
    """Bits and train/test RMSE for every stencil prefix 1..s."""
    curve = []
    for l in range(1, model.s + 1):
        prefix = model.prefix(l)
        bits = bit_cost(prefix).total_bits
        curve.append((l, bits, -(-bits // 8), rmse(prefix, train, clamp),
                      rmse(prefix, test, clamp)))
    return EvalReport(rmse(model, test, clamp), test.nnz, curve)
