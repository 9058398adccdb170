"""Segmentation metrics, convergence statistics and table/CSV emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ShapeError


def confusion(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    idx = truth.ravel().astype(np.int64) * n_classes + pred.ravel().astype(np.int64)
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> float:
    """Mean IoU over classes present in either map; classes absent from both are skipped."""
    cm = confusion(pred, truth, n_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = union > 0
    if not present.any():
        return 1.0
    return float((inter[present] / union[present]).mean())


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    return float((pred == truth).mean()) if pred.size else 1.0


def convergence_stats(series: Sequence[float], threshold: float = 0.2) -> dict:
    """First index whose value falls below ``threshold`` (``None`` if never) and the final value."""
    if len(series) == 0:
        raise ValueError("convergence_stats needs a nonempty series")
    first = next((i for i, v in enumerate(series) if v < threshold), None)
    return {"first_epoch_below": first, "terminal": float(series[-1])}


@dataclass
class MetricsHistory:
    rows: list[dict] = field(default_factory=list)
    threshold: float = 0.2

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epochs must be strictly increasing")
        for key in ("miou", "pixel_acc"):
            if not 0.0 <= row[key] <= 1.0:
                raise ValueError(f"{key}={row[key]} outside [0, 1]")
        self.rows.append(row)

    def summary(self) -> dict:
        if not self.rows:
            return {"epoch_to_loss_threshold": None, "terminal_loss": None}
        stats = convergence_stats([r["total"] for r in self.rows], self.threshold)
        idx = stats["first_epoch_below"]
        epoch = None if idx is None else self.rows[idx]["epoch"]
        return {"epoch_to_loss_threshold": epoch, "terminal_loss": stats["terminal"]}

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "summary": self.summary()}, indent=2)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    cells = [[c for c in columns]] + [
        [f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in columns] for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
