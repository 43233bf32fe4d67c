"""Confusion matrices, per-class precision/recall/F1, and model comparison tables.

Every ratio with a zero denominator is defined as 0, so reports never
contain NaN.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import CLASS_NAMES
from .errors import EmptyInput, InvalidLabel, ShapeMismatch

N = len(CLASS_NAMES)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: tuple

    def __post_init__(self):
        a = np.asarray(self.counts)
        if a.shape != (N, N) or np.any(a < 0):
            raise ShapeMismatch(f"confusion counts must be a {N}x{N} non-negative table")
        object.__setattr__(self, "counts", tuple(tuple(int(v) for v in row) for row in a))

    def array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def to_dict(self) -> dict:
        return {"classes": list(CLASS_NAMES), "counts": [list(r) for r in self.counts]}


def confusion(y_true, y_pred) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ShapeMismatch(f"{t.size} true labels but {p.size} predictions")
    for name, y in (("true", t), ("predicted", p)):
        if y.size and (y.min() < 0 or y.max() >= N):
            raise InvalidLabel(f"{name} labels must lie in 0..{N - 1}")
    counts = np.bincount(t * N + p, minlength=N * N).reshape(N, N)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class ClassReport:
    precision: tuple
    recall: tuple
    f1: tuple
    support: tuple
    accuracy: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "classes": [
                {"class": name, "precision": self.precision[c], "recall": self.recall[c],
                 "f1": self.f1[c], "support": self.support[c]}
                for c, name in enumerate(CLASS_NAMES)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassReport":
        rows = d["classes"]
        get = lambda k: tuple(r[k] for r in rows)  # noqa: E731
        return cls(get("precision"), get("recall"), get("f1"), get("support"), d["accuracy"])

    def to_text(self, title: str = "") -> str:
        lines = [title] if title else []
        lines.append(f"{'class':<10}{'precision':>11}{'recall':>9}{'f1':>9}{'support':>9}")
        for c, name in enumerate(CLASS_NAMES):
            lines.append(f"{name:<10}{self.precision[c]:>11.4f}{self.recall[c]:>9.4f}"
                         f"{self.f1[c]:>9.4f}{self.support[c]:>9d}")
        lines.append(f"accuracy {self.accuracy:.4f} over {sum(self.support)} samples")
        return "\n".join(lines) + "\n"


def report(cm: ConfusionMatrix) -> ClassReport:
    total = cm.total
    if total == 0:
        raise EmptyInput("confusion matrix has no samples")
    c = cm.counts
    rows = [sum(r) for r in c]
    cols = [sum(c[t][p] for t in range(N)) for p in range(N)]
    prec = tuple(_ratio(c[k][k], cols[k]) for k in range(N))
    rec = tuple(_ratio(c[k][k], rows[k]) for k in range(N))
    f1 = tuple((2 * p * r / (p + r)) if p + r > 0 else 0.0 for p, r in zip(prec, rec))
    acc = sum(c[k][k] for k in range(N)) / total
    return ClassReport(prec, rec, f1, tuple(rows), acc)


def evaluate(y_true, y_pred) -> tuple[ConfusionMatrix, ClassReport]:
    cm = confusion(y_true, y_pred)
    return cm, report(cm)


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------


def compare(reports: dict) -> tuple[str, str]:
    """Aligned accuracy / per-class F1 table plus its JSON twin, rows in given order."""
    if not reports:
        raise EmptyInput("nothing to compare")
    width = max(len("model"), *(len(k) for k in reports)) + 2
    head = f"{'model':<{width}}{'accuracy':>10}" + "".join(f"{'f1_' + n:>14}" for n in CLASS_NAMES)
    lines = [head]
    for name, r in reports.items():
        lines.append(f"{name:<{width}}{r.accuracy:>10.4f}" + "".join(f"{v:>14.4f}" for v in r.f1))
    record = {"models": [{"model": name, **r.to_dict()} for name, r in reports.items()]}
    return "\n".join(lines) + "\n", dumps_record(record)


def dumps_record(record: dict) -> str:
    return json.dumps(record, indent=1, sort_keys=True) + "\n"


def parse_comparison(text: str) -> dict:
    """Inverse of the JSON twin from ``compare``: model name -> ClassReport, in order."""
    record = json.loads(text)
    return {m["model"]: ClassReport.from_dict(m) for m in record["models"]}
