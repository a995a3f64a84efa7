"""Confidence on correct and incorrect predictions, reliability diagrams and ECE."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class PredictionRecord:
    probabilities: np.ndarray
    true_class: int

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("probabilities must be a nonnegative vector summing to 1")
        if not 0 <= self.true_class < len(p):
            raise ValueError(f"true class {self.true_class} outside [0, {len(p)})")
        object.__setattr__(self, "probabilities", p)


def records_from(probabilities, labels) -> list:
    return [PredictionRecord(p, int(y)) for p, y in zip(np.asarray(probabilities), labels)]


def _arrays(records):
    if not records:
        raise ValueError("need at least one prediction record")
    P = np.stack([r.probabilities for r in records])
    y = np.array([r.true_class for r in records])
    return P, y


def confidence_error(records: Sequence[PredictionRecord]):
    """``(conf, err, accuracy)``: mean max-probability over correct and over
    incorrect predictions (``None`` when that set is empty), and accuracy."""
    P, y = _arrays(records)
    conf = P.max(axis=1)
    correct = P.argmax(axis=1) == y
    c = float(conf[correct].mean()) if correct.any() else None
    e = float(conf[~correct].mean()) if (~correct).any() else None
    return c, e, float(correct.mean())


@dataclass(frozen=True)
class Bin:
    lo: float
    hi: float
    count: int
    mean_conf: Optional[float]
    accuracy: Optional[float]


@dataclass(frozen=True)
class ReliabilityDiagram:
    n_bins: int
    bins: tuple

    @property
    def total(self) -> int:
        return sum(b.count for b in self.bins)


def reliability_diagram(records: Sequence[PredictionRecord], n_bins: int = 10) -> ReliabilityDiagram:
    """Equal-width confidence bins ``(lo, hi]`` over (0, 1]."""
    if n_bins < 2:
        raise ValueError(f"need at least 2 bins, got {n_bins}")
    P, y = _arrays(records)
    conf = P.max(axis=1)
    correct = P.argmax(axis=1) == y
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        sel = idx == b
        n = int(sel.sum())
        bins.append(Bin(float(edges[b]), float(edges[b + 1]), n,
                        float(conf[sel].mean()) if n else None,
                        float(correct[sel].mean()) if n else None))
    return ReliabilityDiagram(n_bins, tuple(bins))


def ece(diagram: ReliabilityDiagram) -> float:
    """Count-weighted mean of |accuracy - mean confidence| over occupied bins."""
    total = diagram.total
    if total == 0:
        return 0.0
    return float(sum(b.count / total * abs(b.accuracy - b.mean_conf) for b in diagram.bins if b.count))


@dataclass(frozen=True)
class CalibrationReport:
    conf: Optional[float]
    err: Optional[float]
    ece: float
    accuracy: float
    diagram: ReliabilityDiagram = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "conf": self.conf,
            "err": self.err,
            "ece": self.ece,
            "accuracy": self.accuracy,
            "bins": [
                {"lo": b.lo, "hi": b.hi, "count": b.count, "mean_conf": b.mean_conf, "accuracy": b.accuracy}
                for b in self.diagram.bins
            ],
        }

    @classmethod
    def from_dict(cls, d) -> "CalibrationReport":
        bins = tuple(Bin(b["lo"], b["hi"], b["count"], b["mean_conf"], b["accuracy"]) for b in d["bins"])
        return cls(d["conf"], d["err"], d["ece"], d["accuracy"], ReliabilityDiagram(len(bins), bins))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def calibration_report(records: Sequence[PredictionRecord], n_bins: int = 10) -> CalibrationReport:
    conf, err, acc = confidence_error(records)
    diagram = reliability_diagram(records, n_bins)
    return CalibrationReport(conf, err, ece(diagram), acc, diagram)


def plot_reliability(report: CalibrationReport, path, title: str = "") -> Path:
    """Bar chart of per-bin accuracy with the gap to the diagonal shaded."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    bins = report.diagram.bins
    width = bins[0].hi - bins[0].lo
    centers = [b.lo + width / 2 for b in bins]
    acc = [b.accuracy or 0.0 for b in bins]
    gap = [(b.mean_conf - b.accuracy) if b.count else 0.0 for b in bins]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.bar(centers, acc, width=width, edgecolor="black", color="tab:blue", label="accuracy")
    ax.bar(centers, gap, bottom=acc, width=width, edgecolor="red", color="red", alpha=0.3, label="gap")
    ax.plot([0, 1], [0, 1], "k--", lw=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title(title or f"ECE = {report.ece:.3f}")
    ax.legend(loc="upper left")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
