"""Top-1 accuracy with one-vs-rest confusion counts, and the metrics stream."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass
class AccuracyResult:
    accuracy: float
    correct: int
    total: int
    confusion: dict  # per class: {"tp", "tn", "fp", "fn"}

    def accuracy_from_confusion(self) -> float:
        """Top-1 accuracy rebuilt from the per-class counts (sum of TP over classes)."""
        tp = sum(c["tp"] for c in self.confusion.values())
        return 100.0 * tp / self.total


def top1_accuracy(predictions, labels) -> AccuracyResult:
    """``predictions`` are logits ``(N, C)`` or predicted labels ``(N,)``."""
    pred = np.asarray(predictions)
    labels = np.asarray(labels)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    if len(pred) == 0:
        raise ValueError("empty predictions")
    if len(pred) != len(labels):
        raise ValueError(f"{len(pred)} predictions for {len(labels)} labels")
    correct = int((pred == labels).sum())
    n = len(labels)
    classes = np.union1d(np.unique(labels), np.unique(pred))
    confusion = {}
    for c in classes.tolist():
        tp = int(((pred == c) & (labels == c)).sum())
        fp = int(((pred == c) & (labels != c)).sum())
        fn = int(((pred != c) & (labels == c)).sum())
        confusion[int(c)] = {"tp": tp, "fp": fp, "fn": fn, "tn": n - tp - fp - fn}
    return AccuracyResult(100.0 * correct / n, correct, n, confusion)


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    accuracy: float
    losses: dict
    balance_entropy: float | None
    config_hash: str

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 100]")


class MetricsStream:
    """Append-only JSON-lines file, one self-describing record per line."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._last_epoch = -1
        if self.path is not None:
            self.path.write_text("")

    def append(self, record: MetricsRecord | dict) -> None:
        rec = asdict(record) if isinstance(record, MetricsRecord) else dict(record)
        epoch = rec.get("epoch", self._last_epoch)
        if epoch < self._last_epoch:
            raise ValueError(f"epoch {epoch} after {self._last_epoch}: metrics must be monotone")
        self._last_epoch = epoch
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
