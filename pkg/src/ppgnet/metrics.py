"""Error statistics and evaluation reports."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import DataError, atomic_write_bytes

ROWS_FILE = "rows.csv"
AGGREGATES_FILE = "aggregates.csv"
META_FILE = "report.json"
ROW_COLUMNS = ("subject_id", "window_index", "actual_bpm", "predicted_bpm", "fold")
AGGREGATE_COLUMNS = ("scope", "fold", "mae", "sdae", "pcc", "n_windows")


def _pair(actual, predicted, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if a.size != p.size:
        raise ValueError(f"length mismatch: {a.size} actual vs {p.size} predicted")
    if a.size < min_len:
        raise ValueError(f"need at least {min_len} value(s)")
    return a, p


def mae(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.mean(np.abs(a - p)))


def sdae(actual, predicted) -> float:
    """Population standard deviation of the absolute errors."""
    a, p = _pair(actual, predicted)
    return float(np.std(np.abs(a - p)))


def pcc(actual, predicted) -> float:
    a, p = _pair(actual, predicted, min_len=2)
    da, dp = a - a.mean(), p - p.mean()
    sa, sp = math.sqrt(float(da @ da)), math.sqrt(float(dp @ dp))
    if sa == 0 or sp == 0:
        raise ValueError("Pearson correlation undefined for a zero-variance input")
    r = float(da @ dp) / (sa * sp)
    return max(-1.0, min(1.0, r))


def _pcc_or_nan(a, p) -> float:
    try:
        return pcc(a, p)
    except ValueError:
        return float("nan")


def summarize(actual, predicted) -> dict[str, float]:
    a, p = _pair(actual, predicted)
    return {"mae": mae(a, p), "sdae": sdae(a, p), "pcc": _pcc_or_nan(a, p), "n_windows": int(a.size)}


@dataclass
class EvalReport:
    """Per-window predictions and the statistics derived from them.

    ``pcc`` is NaN wherever it is undefined (fewer than two windows or a
    constant series).
    """

    subject_ids: list[str] = field(default_factory=list)
    window_index: list[int] = field(default_factory=list)
    actual: list[float] = field(default_factory=list)
    predicted: list[float] = field(default_factory=list)
    folds: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, subject_ids, window_index, actual, predicted, fold: int = 0) -> None:
        n = len(actual)
        if not (len(subject_ids) == len(window_index) == len(predicted) == n):
            raise ValueError("report rows must align")
        self.subject_ids += [str(s) for s in subject_ids]
        self.window_index += [int(i) for i in window_index]
        self.actual += [float(v) for v in actual]
        self.predicted += [float(v) for v in predicted]
        self.folds += [int(fold)] * n

    def __len__(self) -> int:
        return len(self.actual)

    def aggregates(self) -> list[dict]:
        """Per-fold rows, the pooled row, and the unweighted mean over folds."""
        folds = np.asarray(self.folds)
        a, p = np.asarray(self.actual), np.asarray(self.predicted)
        rows = []
        for f in sorted(set(self.folds)):
            sel = folds == f
            rows.append({"scope": "fold", "fold": int(f), **summarize(a[sel], p[sel])})
        if len(a):
            rows.append({"scope": "pooled", "fold": -1, **summarize(a, p)})
        per_fold = [r for r in rows if r["scope"] == "fold"]
        if per_fold:
            rows.append({
                "scope": "fold_mean",
                "fold": -1,
                "mae": float(np.mean([r["mae"] for r in per_fold])),
                "sdae": float(np.mean([r["sdae"] for r in per_fold])),
                "pcc": float(np.mean([r["pcc"] for r in per_fold])),
                "n_windows": int(sum(r["n_windows"] for r in per_fold)),
            })
        return rows

    def pooled(self) -> dict:
        return next(r for r in self.aggregates() if r["scope"] == "pooled")

    # persistence ----------------------------------------------------------------

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROW_COLUMNS)
        for row in zip(self.subject_ids, self.window_index, self.actual, self.predicted, self.folds):
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), row[4]])
        return buf.getvalue()

    def aggregates_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for r in self.aggregates():
            w.writerow([r["scope"], r["fold"], repr(r["mae"]), repr(r["sdae"]), repr(r["pcc"]), r["n_windows"]])
        return buf.getvalue()

    def save(self, out_dir: str | os.PathLike) -> Path:
        out_dir = Path(out_dir)
        atomic_write_bytes(out_dir / ROWS_FILE, self.rows_csv().encode())
        atomic_write_bytes(out_dir / AGGREGATES_FILE, self.aggregates_csv().encode())
        atomic_write_bytes(out_dir / META_FILE, json.dumps(self.meta, indent=2, sort_keys=True).encode())
        return out_dir

    @classmethod
    def load(cls, out_dir: str | os.PathLike, check: bool = True) -> "EvalReport":
        out_dir = Path(out_dir)
        report = cls(meta=json.loads((out_dir / META_FILE).read_text()))
        with open(out_dir / ROWS_FILE, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != ROW_COLUMNS:
                raise DataError(f"{out_dir / ROWS_FILE}: unexpected columns {reader.fieldnames}")
            for row in reader:
                report.subject_ids.append(row["subject_id"])
                report.window_index.append(int(row["window_index"]))
                report.actual.append(float(row["actual_bpm"]))
                report.predicted.append(float(row["predicted_bpm"]))
                report.folds.append(int(row["fold"]))
        if check:
            report._check_aggregates(out_dir / AGGREGATES_FILE)
        return report

    def _check_aggregates(self, path: Path) -> None:
        with open(path, newline="") as fh:
            stored = list(csv.DictReader(fh))
        fresh = self.aggregates()
        if len(stored) != len(fresh):
            raise DataError(f"{path}: {len(stored)} aggregate rows, rows file implies {len(fresh)}")
        for s, f in zip(stored, fresh):
            if s["scope"] != f["scope"] or int(s["fold"]) != f["fold"] or int(s["n_windows"]) != f["n_windows"]:
                raise DataError(f"{path}: aggregate row {s} inconsistent with rows")
            for key in ("mae", "sdae", "pcc"):
                a, b = float(s[key]), f[key]
                if not (math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12) or (math.isnan(a) and math.isnan(b))):
                    raise DataError(f"{path}: stored {key}={a} but rows give {b}")
