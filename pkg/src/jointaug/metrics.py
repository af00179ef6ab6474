"""Overlap and boundary-distance metrics for label maps.

HD95 is the larger of the two directed 95th-percentile (nearest-rank)
distances between the 4-connected boundaries of the masks.  When either
mask is empty it is undefined and reported as NaN.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .errors import ConfigError

_CROSS = ndimage.generate_binary_structure(2, 1)


def confusion(pred: np.ndarray, truth: np.ndarray, cls: int) -> tuple[int, int, int]:
    if pred.shape != truth.shape:
        raise ConfigError(f"shape mismatch {pred.shape} vs {truth.shape}")
    p, t = pred == cls, truth == cls
    return int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t))


def dsc(tp: int, fp: int, fn: int) -> float:
    d = 2 * tp + fp + fn
    return 1.0 if d == 0 else 2 * tp / d


def sen(tp: int, fp: int, fn: int) -> float:
    return 1.0 if tp + fn == 0 else tp / (tp + fn)


def prc(tp: int, fp: int, fn: int) -> float:
    return 1.0 if tp + fp == 0 else tp / (tp + fp)


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = mask.astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = max(int(math.ceil(q / 100.0 * len(v))), 1)
    return float(v[k - 1])


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distance from every pixel to its nearest dst-boundary pixel, read off at src-boundary pixels
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def hd95(pred: np.ndarray, truth: np.ndarray) -> float:
    if pred.shape != truth.shape:
        raise ConfigError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if not pred.any() or not truth.any():
        return math.nan
    bp, bt = boundary(pred), boundary(truth)
    return max(nearest_rank(_directed(bp, bt)), nearest_rank(_directed(bt, bp)))


@dataclass
class ClassMetrics:
    cls: int
    tp: int
    fp: int
    fn: int
    dsc: float
    sen: float
    prc: float
    hd95: float

    @classmethod
    def of(cls, pred: np.ndarray, truth: np.ndarray, k: int) -> "ClassMetrics":
        tp, fp, fn = confusion(pred, truth, k)
        return cls(k, tp, fp, fn, dsc(tp, fp, fn), sen(tp, fp, fn), prc(tp, fp, fn), hd95(pred == k, truth == k))


@dataclass
class MetricsReport:
    """Per-class metrics averaged over cases; HD95 means skip undefined cases."""

    per_case: list[list[ClassMetrics]] = field(default_factory=list)

    def add(self, pred: np.ndarray, truth: np.ndarray, n_classes: int) -> None:
        self.per_case.append([ClassMetrics.of(pred, truth, k) for k in range(1, n_classes)])

    def classes(self) -> list[int]:
        return [m.cls for m in self.per_case[0]] if self.per_case else []

    def summary(self, cls: int) -> dict:
        rows = [m for case in self.per_case for m in case if m.cls == cls]
        hds = [m.hd95 for m in rows if not math.isnan(m.hd95)]
        return {
            "class": cls,
            "dsc": float(np.mean([m.dsc for m in rows])),
            "sen": float(np.mean([m.sen for m in rows])),
            "prc": float(np.mean([m.prc for m in rows])),
            "hd95": float(np.mean(hds)) if hds else math.nan,
            "hd95_undefined": len(rows) - len(hds),
            "tp": sum(m.tp for m in rows),
            "fp": sum(m.fp for m in rows),
            "fn": sum(m.fn for m in rows),
            "cases": len(rows),
        }

    def mean(self) -> dict:
        rows = [self.summary(k) for k in self.classes()]
        hds = [r["hd95"] for r in rows if not math.isnan(r["hd95"])]
        return {
            "class": "mean",
            "dsc": float(np.mean([r["dsc"] for r in rows])),
            "sen": float(np.mean([r["sen"] for r in rows])),
            "prc": float(np.mean([r["prc"] for r in rows])),
            "hd95": float(np.mean(hds)) if hds else math.nan,
            "hd95_undefined": sum(r["hd95_undefined"] for r in rows),
            "tp": sum(r["tp"] for r in rows),
            "fp": sum(r["fp"] for r in rows),
            "fn": sum(r["fn"] for r in rows),
            "cases": len(self.per_case),
        }


CSV_FIELDS = ["run", "arm", "tea", "class", "dsc", "sen", "prc", "hd95", "hd95_undefined", "tp", "fp", "fn", "cases"]


def report_rows(report: MetricsReport, run: str, arm: str, tea: str) -> list[dict]:
    rows = [report.summary(k) for k in report.classes()]
    if len(rows) > 1:
        rows.append(report.mean())
    return [dict(r, run=run, arm=arm, tea=tea) for r in rows]


def write_metrics_csv(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(float(r[k])) if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
