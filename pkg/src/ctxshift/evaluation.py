"""Accuracy metrics, embedding export and run comparison."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .lt_data import GROUPS

HEAD_CHOICES = ("uniform", "balanced", "ensemble")


@dataclass
class Metrics:
    overall_acc: float
    group_acc: dict[str, float]
    per_class_acc: list[float]
    class_sizes: list[int] = field(default_factory=list)

    def to_row(self) -> dict:
        return {
            "overall": self.overall_acc,
            **{g: self.group_acc.get(g, float("nan")) for g in GROUPS},
        }

    def to_dict(self) -> dict:
        return {
            "overall_acc": self.overall_acc,
            "group_acc": self.group_acc,
            "per_class_acc": self.per_class_acc,
            "class_sizes": self.class_sizes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(d["overall_acc"], d["group_acc"], d["per_class_acc"], d.get("class_sizes", []))


def metrics_from_predictions(pred, labels, shot_groups: dict[int, str], num_classes: int | None = None) -> Metrics:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty test set")
    K = num_classes or max(int(labels.max()) + 1, len(shot_groups))
    sizes = np.bincount(labels, minlength=K)
    hits = np.bincount(labels[pred == labels], minlength=K)
    per_class = np.divide(hits, sizes, out=np.zeros(K), where=sizes > 0)
    groups = {}
    for g in GROUPS:
        members = [k for k in range(K) if shot_groups.get(k) == g and sizes[k] > 0]
        if members:
            groups[g] = float(np.mean(per_class[members]))
    overall = float((pred == labels).mean())
    return Metrics(overall, groups, per_class.tolist(), sizes.tolist())


@torch.no_grad()
def predict(model, images: torch.Tensor, head_choice: str = "balanced", normalize=None,
            batch_size: int = 1000) -> np.ndarray:
    """Argmax class per image; ties resolve to the lowest class index."""
    if head_choice not in HEAD_CHOICES:
        raise ValueError(f"head_choice must be one of {HEAD_CHOICES}")
    model.eval()
    preds = []
    for start in range(0, images.shape[0], batch_size):
        x = images[start : start + batch_size]
        if normalize is not None:
            x = normalize(x)
        feats = model.features(x)
        if head_choice == "ensemble":
            scores = (torch.softmax(model.head_uniform(feats), 1) + torch.softmax(model.head_balanced(feats), 1)) / 2
        else:
            scores = model.head(head_choice)(feats)
        preds.append(scores.argmax(dim=1).cpu().numpy())  # first max wins
    return np.concatenate(preds)


def evaluate(model, test, shot_groups: dict[int, str], head_choice: str = "balanced", normalize=None) -> Metrics:
    """Metrics of ``model`` on a balanced test set (an ImageSet-like object)."""
    from .training import Normalizer, to_chw

    if len(test.labels) == 0:
        raise ValueError("empty test set")
    if normalize is None and getattr(model, "normalizer_state", None):
        normalize = Normalizer(model.normalizer_state["mean"], model.normalizer_state["std"])
    pred = predict(model, to_chw(test.images), head_choice, normalize)
    return metrics_from_predictions(pred, test.labels, shot_groups, model.num_classes)


@torch.no_grad()
def export_embeddings(model, images: np.ndarray, labels: np.ndarray, normalize=None, ids=None) -> list[tuple]:
    """Rows ``(sample_id, label, *feature_coordinates)`` in input order."""
    from .training import Normalizer, to_chw

    if normalize is None and getattr(model, "normalizer_state", None):
        normalize = Normalizer(model.normalizer_state["mean"], model.normalizer_state["std"])
    model.eval()
    x = to_chw(images)
    feats = []
    for start in range(0, x.shape[0], 1000):
        xb = x[start : start + 1000]
        feats.append(model.features(normalize(xb) if normalize else xb).cpu().numpy())
    feats = np.concatenate(feats) if feats else np.zeros((0, model.extractor.feature_dim))
    ids = range(len(labels)) if ids is None else ids
    return [(int(i), int(y), *map(float, f)) for i, y, f in zip(ids, labels, feats)]


def embeddings_to_csv(rows: list[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    dim = len(rows[0]) - 2 if rows else 0
    writer.writerow(["sample_id", "label", *[f"z{i}" for i in range(dim)]])
    for r in rows:
        writer.writerow([r[0], r[1], *[repr(v) for v in r[2:]]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# run comparison


@dataclass
class RunRecord:
    method: str
    dataset: str
    metrics: Metrics

    def to_dict(self) -> dict:
        return {"method": self.method, "dataset": self.dataset, "metrics": self.metrics.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(d["method"], d["dataset"], Metrics.from_dict(d["metrics"]))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compare_runs(records: list[RunRecord]) -> dict:
    """Table of overall/group accuracy with deltas against the first record,
    plus the overall-accuracy ordering of the methods."""
    if len(records) < 2:
        raise ValueError("need at least two runs to compare")
    datasets = {r.dataset for r in records}
    if len(datasets) != 1:
        raise ValueError(f"runs come from different datasets: {sorted(datasets)}")
    ref = records[0].metrics.to_row()
    rows = []
    for r in records:
        row = r.metrics.to_row()
        rows.append({"method": r.method, **row, **{f"d_{k}": row[k] - ref[k] for k in row}})
    ranked = sorted(records, key=lambda r: -r.metrics.overall_acc)
    return {
        "dataset": records[0].dataset,
        "reference": records[0].method,
        "rows": rows,
        "ordering": [r.method for r in ranked],
    }


def holds_ordering(report: dict, *methods: str) -> bool:
    """True if overall accuracy strictly decreases along ``methods``."""
    acc = {row["method"]: row["overall"] for row in report["rows"]}
    return all(acc[a] > acc[b] for a, b in zip(methods, methods[1:]))


def format_report(report: dict) -> str:
    cols = ["overall", *GROUPS]
    lines = [f"dataset: {report['dataset']}  (deltas vs {report['reference']})",
             f"{'method':<12}" + "".join(f"{c:>16}" for c in cols)]
    for row in report["rows"]:
        cells = "".join(f"{100 * row[c]:>8.1f} ({100 * row['d_' + c]:+5.1f})" for c in cols)
        lines.append(f"{row['method']:<12}{cells}")
    lines.append("ordering (overall): " + " > ".join(report["ordering"]))
    return "\n".join(lines)
