"""Masked matrices, error metrics and the plain-text CSV format.

A :class:`MaskedMatrix` pairs a real matrix with a boolean observation mask.
Unobserved cells hold ``0.0`` internally but can never be read through the
public accessors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FLOAT_FMT = "{:.17g}"


class MatrixError(ValueError):
    """Malformed matrix input (shapes, parsing, empty sets)."""


class UnobservedCellError(LookupError):
    """Raised when reading a cell whose mask bit is false."""


@dataclass(frozen=True)
class MaskedMatrix:
    """Observed values plus a boolean mask (``True`` means observed).

    Both arrays are copied and made read-only on construction.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2 or mask.ndim != 2:
            raise MatrixError("values and mask must be 2-d")
        if values.shape != mask.shape:
            raise MatrixError(f"shape mismatch: values {values.shape} vs mask {mask.shape}")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise MatrixError("matrix must have at least one row and one column")
        if not np.all(np.isfinite(values[mask])):
            raise MatrixError("observed values must be finite")
        values[~mask] = 0.0
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_nan(cls, arr) -> "MaskedMatrix":
        """Build from an array where NaN marks a missing cell."""
        arr = np.asarray(arr, dtype=float)
        return cls(np.nan_to_num(arr, nan=0.0), ~np.isnan(arr))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def get(self, i: int, j: int) -> float:
        m, n = self.shape
        if not (0 <= i < m and 0 <= j < n):
            raise IndexError(f"cell ({i}, {j}) out of bounds for shape {self.shape}")
        if not self.mask[i, j]:
            raise UnobservedCellError(f"cell ({i}, {j}) is unobserved")
        return float(self.values[i, j])

    def filled(self, fill: float = np.nan) -> np.ndarray:
        """Dense copy with ``fill`` at unobserved cells."""
        out = np.array(self.values)
        out[~self.mask] = fill
        return out

    def observed_fraction(self) -> float:
        return float(self.mask.mean())

    def transpose(self) -> "MaskedMatrix":
        return MaskedMatrix(self.values.T, self.mask.T)


def get(mat: MaskedMatrix, i: int, j: int) -> float:
    return mat.get(i, j)


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    mae: float
    count: int

    def to_csv_row(self) -> str:
        return ",".join([FLOAT_FMT.format(self.rmse), FLOAT_FMT.format(self.mae), str(self.count)])

    @staticmethod
    def csv_header() -> str:
        return "rmse,mae,count"


def evaluate(pred, truth, eval_mask) -> EvalReport:
    """RMSE and MAE of ``pred`` against ``truth`` over the cells in ``eval_mask``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    eval_mask = np.asarray(eval_mask, dtype=bool)
    if not (pred.shape == truth.shape == eval_mask.shape):
        raise MatrixError(
            f"shape mismatch: pred {pred.shape}, truth {truth.shape}, mask {eval_mask.shape}"
        )
    count = int(eval_mask.sum())
    if count == 0:
        raise MatrixError("empty evaluation set")
    diff = pred[eval_mask] - truth[eval_mask]
    rmse = float(np.sqrt(np.mean(diff**2)))
    mae = float(np.mean(np.abs(diff)))
    # rounding can put mae a hair above rmse when all errors are equal
    return EvalReport(rmse=max(rmse, mae) if math.isclose(rmse, mae) else rmse, mae=mae, count=count)


def write_masked_csv(mat: MaskedMatrix, path, missing_token: str = "NA") -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row_vals, row_mask in zip(mat.values, mat.mask):
            writer.writerow(
                FLOAT_FMT.format(v) if ok else missing_token for v, ok in zip(row_vals, row_mask)
            )


def write_dense_csv(arr, path, header: Sequence[str] | None = None) -> None:
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header is not None:
            writer.writerow(header)
        for row in arr:
            writer.writerow(FLOAT_FMT.format(v) for v in row)


def parse_masked_rows(rows: Iterable[Sequence[str]], missing_token: str = "NA") -> MaskedMatrix:
    values, mask = [], []
    width = None
    for lineno, row in enumerate(rows, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise MatrixError(f"ragged rows: line {lineno} has {len(row)} cells, expected {width}")
        vals, obs = [], []
        for cell in row:
            cell = cell.strip()
            if cell == missing_token:
                vals.append(0.0)
                obs.append(False)
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise MatrixError(f"unparseable numeric cell {cell!r} on line {lineno}") from None
            obs.append(True)
        values.append(vals)
        mask.append(obs)
    if not values:
        raise MatrixError("empty matrix")
    return MaskedMatrix(np.array(values), np.array(mask))


def read_masked_csv(path, missing_token: str = "NA") -> MaskedMatrix:
    with Path(path).open(newline="") as fh:
        return parse_masked_rows(csv.reader(fh), missing_token)


def histogram(values, bin_edges) -> np.ndarray:
    """Counts per bin; bins are half-open except the last, which is closed.

    Values outside ``[bin_edges[0], bin_edges[-1]]`` are not counted.
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2:
        raise MatrixError("need at least two bin edges")
    if np.any(np.diff(edges) <= 0):
        raise MatrixError("bin edges must be strictly ascending")
    vals = np.asarray(values, dtype=float).ravel()
    # np.histogram uses exactly this binning convention
    counts, _ = np.histogram(vals, bins=edges)
    return counts.astype(int)


def total_variation(counts_a, counts_b) -> float:
    """Total-variation distance between two histograms after normalising each."""
    a = np.asarray(counts_a, dtype=float)
    b = np.asarray(counts_b, dtype=float)
    if a.shape != b.shape:
        raise MatrixError("histograms must have the same number of bins")
    if a.sum() <= 0 or b.sum() <= 0:
        raise MatrixError("cannot normalise an empty histogram")
    return 0.5 * float(np.abs(a / a.sum() - b / b.sum()).sum())


@dataclass
class Completion:
    """A completed matrix with one status string per cell.

    Status is ``"observed"`` for copied-through cells, ``"estimated"`` for
    imputed ones, ``"missing"`` for unobserved cells that were not targeted,
    and a failure code otherwise (the value is then NaN).
    """

    values: np.ndarray
    status: np.ndarray

    @property
    def estimated(self) -> np.ndarray:
        return self.status == "estimated"

    @property
    def failed(self) -> np.ndarray:
        return ~np.isin(self.status, ("estimated", "observed", "missing"))
