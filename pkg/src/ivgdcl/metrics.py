"""IoU, R@n at IoU=mu, and mIoU for temporal grounding."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence, Union

from .datamodel import BoundaryIndices, TimeInterval

Interval = Union[TimeInterval, BoundaryIndices]
THRESHOLDS = (0.1, 0.3, 0.5, 0.7)


def _span(x: Interval) -> tuple[float, float]:
    # index spans are inclusive: [i, j] covers j - i + 1 cells
    if isinstance(x, BoundaryIndices):
        return float(x.i_start), float(x.i_end + 1)
    return x.start_s, x.end_s


def iou(a: Interval, b: Interval) -> float:
    if type(a) is not type(b):
        raise TypeError(f"cannot compare {type(a).__name__} with {type(b).__name__}")
    (a0, a1), (b0, b1) = _span(a), _span(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    if union <= 0:
        # two identical zero-length time intervals
        return 1.0 if (a0, a1) == (b0, b1) else 0.0
    return inter / union


def recall_at_n(predictions: Sequence[Sequence[Interval]], golds: Sequence[Interval],
                n: int, mu: float) -> float:
    """Percent of examples with an IoU strictly above ``mu`` among the top-``n`` predictions."""
    if not golds:
        raise ValueError("no gold intervals")
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} prediction lists for {len(golds)} golds")
    if n < 1:
        raise ValueError("n must be >= 1")
    hits = 0
    for preds, gold in zip(predictions, golds):
        if not preds:
            raise ValueError("every example needs at least one prediction")
        if max(iou(p, gold) for p in preds[:n]) > mu:
            hits += 1
    return 100.0 * hits / len(golds)


def mean_iou(predictions: Sequence[Interval], golds: Sequence[Interval]) -> float:
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions for {len(golds)} golds")
    if not golds:
        raise ValueError("no gold intervals")
    return 100.0 * sum(iou(p, g) for p, g in zip(predictions, golds)) / len(golds)


@dataclass(frozen=True)
class EvalReport:
    r1_iou: dict[float, float]
    mean_iou: float
    n_examples: int

    def to_dict(self) -> dict:
        return {"r1_iou": {str(k): v for k, v in self.r1_iou.items()},
                "mean_iou": self.mean_iou, "n_examples": self.n_examples}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls({float(k): v for k, v in d["r1_iou"].items()}, d["mean_iou"], d["n_examples"])


def evaluate_predictions(predictions: Sequence[Interval], golds: Sequence[Interval],
                         thresholds: Sequence[float] = THRESHOLDS) -> EvalReport:
    top1 = [[p] for p in predictions]
    return EvalReport(
        {mu: recall_at_n(top1, golds, 1, mu) for mu in thresholds},
        mean_iou(predictions, golds),
        len(golds),
    )


def report_table_csv(rows: dict[str, EvalReport], thresholds: Sequence[float] = THRESHOLDS,
                     extra_columns: dict[str, dict[str, object]] | None = None) -> str:
    """One row per model: IoU columns followed by mIoU."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    extra_names = sorted({k for v in (extra_columns or {}).values() for k in v})
    writer.writerow(["model", *extra_names, *(f"IoU={mu}" for mu in thresholds), "mIoU"])
    for name, rep in rows.items():
        extra = (extra_columns or {}).get(name, {})
        writer.writerow([name, *(extra.get(k, "") for k in extra_names),
                         *(f"{rep.r1_iou[mu]:.2f}" for mu in thresholds),
                         f"{rep.mean_iou:.2f}"])
    return buf.getvalue()
