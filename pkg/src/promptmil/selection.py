"""Language-guided instance selection.

Each patch embedding is scored by cosine similarity against the scale's
region-prompt embedding and the top fraction is kept. Scores depend on no
trainable parameter, so selection runs once per slide and is cached across
epochs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import FeatureBag


class SelectionConfigError(ValueError):
    pass


@dataclass
class SelectionResult:
    kept: np.ndarray      # indices ordered by descending score
    scores: np.ndarray    # per-instance similarity, length K
    ratio: float

    @property
    def n_kept(self) -> int:
        return len(self.kept)


def score_instances(region_embedding: np.ndarray, bag: FeatureBag) -> np.ndarray:
    """Cosine similarity of every bag row against the region embedding."""
    t = np.asarray(region_embedding, dtype=np.float64)
    if t.ndim != 1 or t.shape[0] != bag.dim:
        raise ValueError(
            f"region embedding has dim {t.shape}, bag rows have dim {bag.dim}")
    feats = bag.features.astype(np.float64)
    t_norm = np.linalg.norm(t)
    row_norms = np.linalg.norm(feats, axis=1)
    scores = np.zeros(bag.n_instances)
    valid = (row_norms >= 1e-12) & (t_norm >= 1e-12)
    scores[valid] = (feats[valid] @ t) / (row_norms[valid] * t_norm)
    return scores


def select_top(bag: FeatureBag, scores: np.ndarray, ratio: float) -> SelectionResult:
    """Keep max(1, round(ratio*K)) highest-scoring instances; ties broken by
    ascending original index; ratio 1 keeps everything."""
    if not 0.0 < ratio <= 1.0:
        raise SelectionConfigError(f"selection ratio must lie in (0, 1], got {ratio}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (bag.n_instances,):
        raise ValueError("scores length does not match bag size")
    k = max(1, int(np.floor(ratio * bag.n_instances + 0.5)))
    order = np.argsort(-scores, kind="stable")
    return SelectionResult(kept=order[:k].copy(), scores=scores, ratio=ratio)


def select_instances(region_embedding: np.ndarray, bag: FeatureBag,
                     ratio: float) -> SelectionResult:
    return select_top(bag, score_instances(region_embedding, bag), ratio)


def export_selection_csv(path: str | Path, rows: list[tuple[str, str, SelectionResult]]) -> None:
    """Audit export: one line per (slide, scale, instance) with its score
    and whether it was kept."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "scale", "index", "score", "kept"])
        for slide_id, scale, result in rows:
            kept = set(int(i) for i in result.kept)
            for idx, score in enumerate(result.scores):
                writer.writerow([slide_id, scale, idx, f"{score:.8f}",
                                 int(idx in kept)])
