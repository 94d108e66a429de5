"""Entity-guided cross-attention and entity-level class logits.

One query per entity (its generic prompt embedding) attends over the kept
instances; the attended feature is layer-normalized and the prompt
embedding added back as a residual. Class logits are cosine similarities
against the entity's subtype-specific attribute embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class AttentionParams:
    """Query/key/value projections shared across entities and scales."""

    w_q: ad.Tensor
    w_k: ad.Tensor
    w_v: ad.Tensor

    @property
    def dim_keys(self) -> int:
        return self.w_q.cols

    def trainables(self) -> dict[str, ad.Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}


def init_attention_params(dim: int, rng: np.random.Generator,
                          dtype=np.float32) -> AttentionParams:
    # fan-in scaling keeps initial attention logits O(1)
    def mk():
        return ad.parameter(rng.standard_normal((dim, dim)) / np.sqrt(dim), dtype=dtype)

    return AttentionParams(w_q=mk(), w_k=mk(), w_v=mk())


@dataclass
class EntityFeature:
    entity: str
    scale: str
    feature: ad.Tensor
    weights: ad.Tensor | None  # attention over kept instances, sums to 1


def project_instances(kept: ad.Tensor, params: AttentionParams) -> tuple[ad.Tensor, ad.Tensor]:
    """Key/value projections of the kept-instance matrix, computed once per
    slide and shared by every entity query."""
    keys = ad.matmul(kept, params.w_k)
    values = ad.matmul(kept, params.w_v)
    return keys, values


def entity_cross_attention(d_gen: ad.Tensor, keys: ad.Tensor, values: ad.Tensor,
                           params: AttentionParams, entity: str = "", scale: str = "",
                           query: ad.Tensor | None = None,
                           use_attention: bool = True,
                           norm_after_residual: bool = False) -> EntityFeature:
    """Single-query scaled dot-product attention over kept instances.

    query, when given, must equal d_gen projected through w_q (callers batch
    that projection across entities). use_attention False substitutes a
    uniform mean over the projected instances (the cross-attention
    ablation), keeping the same parameter count. norm_after_residual moves
    the prompt residual inside the layer norm instead of adding it after.
    """
    if keys.rows < 1:
        raise ValueError("at least one kept instance required")
    if use_attention:
        if query is None:
            query = ad.vecmat(d_gen, params.w_q)
        logits = ad.scale(ad.matvec(keys, query), 1.0 / np.sqrt(params.dim_keys))
        weights = ad.softmax(logits)
        attended = ad.vecmat(weights, values)
    else:
        weights = None
        attended = ad.mean_rows(values)
    if norm_after_residual:
        feature = ad.layer_norm(ad.add(attended, d_gen))
    else:
        feature = ad.add(ad.layer_norm(attended), d_gen)
    return EntityFeature(entity=entity, scale=scale, feature=feature, weights=weights)


def entity_logits(feature: ad.Tensor, attribute_matrix: ad.Tensor) -> ad.Tensor:
    """Per-class cosine similarity of an entity feature against the C x d
    matrix of its subtype-specific attribute embeddings (subtype order)."""
    if attribute_matrix.value.ndim != 2:
        raise ValueError("attribute_matrix must be C x d")
    return ad.cosine_rows(attribute_matrix, feature)


def entity_logits_by_name(feature: ad.Tensor, attribute_embeds: dict[str, ad.Tensor],
                          subtypes: list[str]) -> ad.Tensor:
    """Dict-based variant; raises on a missing subtype."""
    missing = [c for c in subtypes if c not in attribute_embeds]
    if missing:
        raise KeyError(f"missing attribute embeddings for subtypes {missing}")
    return entity_logits(feature, ad.stack_rows([attribute_embeds[c] for c in subtypes]))


def export_attention_csv(path, rows) -> None:
    """Audit export of per-entity attention over kept instances.

    rows: iterables of (slide_id, scale, entity, kept_indices, weights);
    instance_index refers back to the original bag position."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "scale", "entity", "instance_index", "weight"])
        for slide_id, scale, entity, kept, weights in rows:
            for idx, w in zip(kept, weights):
                writer.writerow([slide_id, scale, entity, int(idx), f"{w:.8f}"])
