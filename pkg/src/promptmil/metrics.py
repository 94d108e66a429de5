"""AUC, macro F1, accuracy, and cross-repeat aggregation.

Binary AUC uses the tie-averaged rank statistic; multi-class AUC is the
macro average of one-vs-rest binary AUCs; F1 is macro-averaged over
classes; accuracy uses argmax with ties going to the lowest class index.
Repeats aggregate to mean and population standard deviation.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


class AucUndefinedError(ValueError):
    """AUC needs every class present; carries the still-defined F1/ACC."""

    def __init__(self, message: str, f1: float, acc: float):
        super().__init__(message)
        self.f1 = f1
        self.acc = acc


@dataclass
class MetricEntry:
    auc: float
    f1: float
    acc: float


@dataclass
class MetricReport:
    entries: list[MetricEntry] = field(default_factory=list)

    def mean(self) -> MetricEntry:
        return MetricEntry(*(float(np.mean([getattr(e, k) for e in self.entries]))
                             for k in ("auc", "f1", "acc")))

    def std(self, population: bool = True) -> MetricEntry:
        ddof = 0 if population else 1
        if len(self.entries) == 1:
            return MetricEntry(0.0, 0.0, 0.0)
        return MetricEntry(*(float(np.std([getattr(e, k) for e in self.entries],
                                          ddof=ddof))
                             for k in ("auc", "f1", "acc")))


def binary_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Rank-statistic AUC with tie-averaged ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AucUndefinedError("AUC undefined: one class absent", float("nan"),
                                float("nan"))
    ranks = rankdata(scores, method="average")
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def accuracy(probabilities: np.ndarray, labels: np.ndarray) -> float:
    preds = np.argmax(probabilities, axis=1)  # ties resolve to lowest index
    return float(np.mean(preds == labels))


def macro_f1(probabilities: np.ndarray, labels: np.ndarray) -> float:
    n_classes = probabilities.shape[1]
    preds = np.argmax(probabilities, axis=1)
    f1s = []
    for c in range(n_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


def macro_auc(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Macro one-vs-rest AUC; every class must appear in the labels."""
    n_classes = probabilities.shape[1]
    aucs = []
    for c in range(n_classes):
        positives = labels == c
        if positives.all() or not positives.any():
            raise AucUndefinedError(
                f"AUC undefined: class {c} absent or exclusive",
                macro_f1(probabilities, labels), accuracy(probabilities, labels))
        aucs.append(binary_auc(probabilities[:, c], positives))
    return float(np.mean(aucs))


def compute_metrics(probabilities: np.ndarray, labels: np.ndarray) -> MetricEntry:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if probabilities.ndim != 2 or len(labels) != probabilities.shape[0]:
        raise ValueError("probabilities must be N x C with N matching labels")
    if len(labels) < 2:
        raise ValueError("at least two predictions required")
    f1 = macro_f1(probabilities, labels)
    acc = accuracy(probabilities, labels)
    present = np.unique(labels)
    if len(present) < probabilities.shape[1]:
        raise AucUndefinedError(
            f"AUC undefined: only classes {present.tolist()} present", f1, acc)
    return MetricEntry(auc=macro_auc(probabilities, labels), f1=f1, acc=acc)


def aggregate_repeats(entries: list[MetricEntry],
                      population_std: bool = True) -> MetricReport:
    if not entries:
        raise ValueError("no entries to aggregate")
    report = MetricReport(entries=list(entries))
    # touch both to validate finiteness early
    report.mean(), report.std(population_std)
    return report


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.3f}"


def write_report(report: MetricReport, out_dir: str | Path, setting: str,
                 shots: int, population_std: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mean, std = report.mean(), report.std(population_std)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "shots", "repeat", "auc", "f1", "acc"])
        for i, e in enumerate(report.entries):
            writer.writerow([setting, shots, i, f"{e.auc:.6f}", f"{e.f1:.6f}",
                             f"{e.acc:.6f}"])
        writer.writerow([setting, shots, "mean±std",
                         format_cell(mean.auc, std.auc),
                         format_cell(mean.f1, std.f1),
                         format_cell(mean.acc, std.acc)])
    payload = {
        "setting": setting,
        "shots": shots,
        "auc_definition": "macro one-vs-rest, tie-averaged rank statistic",
        "f1_definition": "macro over classes",
        "std": "population" if population_std else "sample",
        "repeats": [{"auc": e.auc, "f1": e.f1, "acc": e.acc}
                    for e in report.entries],
        "mean": {"auc": mean.auc, "f1": mean.f1, "acc": mean.acc},
        "stddev": {"auc": std.auc, "f1": std.f1, "acc": std.acc},
    }
    with open(out / "report.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
