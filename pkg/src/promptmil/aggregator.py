"""Cross-scale entity graph, one-layer graph attention, gated pooling.

Entity features from both scales form one node set; each node's neighbors
are its highest-cosine peers (self excluded from candidates, re-added as
an explicit self-loop). Topology is a discrete choice recomputed from
current feature values each forward pass; gradients flow through feature
values only. Refined features are pooled per scale with a tanh x sigmoid
gated attention and aligned with slide-level prompts by cosine.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

LEAKY_SLOPE = 0.2


@dataclass
class EntityGraph:
    n_nodes: int
    neighbors: list[list[int]]  # per node, without the self-loop


@dataclass
class GatParams:
    w_g: ad.Tensor      # d x d
    attn: ad.Tensor     # 2d attention vector
    slope: float = LEAKY_SLOPE

    def trainables(self) -> dict[str, ad.Tensor]:
        return {"w_g": self.w_g, "gat_a": self.attn}


@dataclass
class GatedPoolParams:
    w_v: ad.Tensor      # d x d
    w_u: ad.Tensor      # d x d
    w: ad.Tensor        # d

    def trainables(self) -> dict[str, ad.Tensor]:
        return {"pool_w_v": self.w_v, "pool_w_u": self.w_u, "pool_w": self.w}


def init_gat_params(dim: int, rng: np.random.Generator, dtype=np.float32) -> GatParams:
    return GatParams(
        w_g=ad.parameter(rng.standard_normal((dim, dim)) / np.sqrt(dim), dtype=dtype),
        attn=ad.parameter(rng.standard_normal(2 * dim) / np.sqrt(2 * dim), dtype=dtype),
    )


def init_pool_params(dim: int, rng: np.random.Generator,
                     dtype=np.float32) -> GatedPoolParams:
    return GatedPoolParams(
        w_v=ad.parameter(rng.standard_normal((dim, dim)) / np.sqrt(dim), dtype=dtype),
        w_u=ad.parameter(rng.standard_normal((dim, dim)) / np.sqrt(dim), dtype=dtype),
        w=ad.parameter(rng.standard_normal(dim) / np.sqrt(dim), dtype=dtype),
    )


def build_entity_graph(features: list[np.ndarray], n_neighbors: int) -> EntityGraph:
    """Neighbors of each node are the n highest-cosine distinct nodes,
    ordered by descending similarity with ties broken by ascending index.
    n_neighbors is clamped to N-1 when it exceeds the available nodes."""
    n = len(features)
    if n < 2:
        raise ValueError("graph construction needs at least two nodes")
    if n_neighbors < 1:
        raise ValueError("n_neighbors must be >= 1")
    k = min(n_neighbors, n - 1)
    rows = np.stack([np.asarray(f, dtype=np.float64) for f in features])
    norms = np.linalg.norm(rows, axis=1)
    safe = np.where(norms < 1e-12, 1.0, norms)
    sim = (rows / safe[:, None]) @ (rows / safe[:, None]).T
    sim[norms < 1e-12, :] = 0.0
    sim[:, norms < 1e-12] = 0.0
    neighbors = []
    for v in range(n):
        row = sim[v].copy()
        row[v] = -np.inf  # self is not a candidate
        order = np.argsort(-row, kind="stable")
        neighbors.append([int(u) for u in order[:k]])
    return EntityGraph(n_nodes=n, neighbors=neighbors)


def gat_update(node_features: list[ad.Tensor], graph: EntityGraph,
               params: GatParams) -> tuple[list[ad.Tensor], list[ad.Tensor]]:
    """One graph-attention layer, one head.

    Per node: attention coefficients over its neighbors plus the appended
    self-loop via LeakyReLU of the scoring vector applied to concatenated
    projections, softmax-normalized; the update is ReLU of the
    coefficient-weighted sum of projected neighbors.
    Returns (refined features, per-node attention coefficient vectors).

    The scoring vector splits over the concatenation, so the two halves are
    applied to all projected nodes up front and per-edge scores reduce to
    scalar adds.
    """
    if len(node_features) != graph.n_nodes:
        raise ValueError("feature count does not match graph")
    dim = params.w_g.rows
    projected = ad.matmul(ad.stack_rows(node_features), params.w_g)
    score_self = ad.matvec(projected, ad.slice_vec(params.attn, 0, dim))
    score_peer = ad.matvec(projected, ad.slice_vec(params.attn, dim, 2 * dim))
    refined = []
    coefficients = []
    for v in range(graph.n_nodes):
        hood = graph.neighbors[v] + [v]  # explicit self-loop
        scores = ad.leaky_relu(
            ad.add_scalar(ad.gather(score_peer, hood), ad.pick(score_self, v)),
            params.slope)
        alpha = ad.softmax(scores)
        refined.append(ad.relu(ad.vecmat(alpha, ad.gather_rows(projected, hood))))
        coefficients.append(alpha)
    return refined, coefficients


def gated_attention_pool(features: list[ad.Tensor],
                         params: GatedPoolParams) -> tuple[ad.Tensor, ad.Tensor]:
    """tanh x sigmoid gated attention pooling to one slide vector.

    Returns (pooled vector, attention weights summing to 1)."""
    if not features:
        raise ValueError("cannot pool an empty feature list")
    h = ad.stack_rows(features)
    gate_v = ad.tanh(ad.matmul(h, params.w_v))
    gate_u = ad.sigmoid(ad.matmul(h, params.w_u))
    scores = ad.matvec(ad.mul(gate_v, gate_u), params.w)
    weights = ad.softmax(scores)
    pooled = ad.vecmat(weights, h)
    return pooled, weights


def slide_logits(slide_feature: ad.Tensor, slide_matrix: ad.Tensor) -> ad.Tensor:
    """Per-class cosine similarity against the C x d matrix of slide-level
    prompt embeddings (subtype order)."""
    if slide_matrix.value.ndim != 2:
        raise ValueError("slide_matrix must be C x d")
    return ad.cosine_rows(slide_matrix, slide_feature)


def slide_logits_by_name(slide_feature: ad.Tensor, slide_embeds: dict[str, ad.Tensor],
                         subtypes: list[str]) -> ad.Tensor:
    missing = [c for c in subtypes if c not in slide_embeds]
    if missing:
        raise KeyError(f"missing slide embeddings for subtypes {missing}")
    return slide_logits(slide_feature,
                        ad.stack_rows([slide_embeds[c] for c in subtypes]))


def dump_graph(path: str | Path, graph: EntityGraph,
               nodes: list[tuple[str, str]],
               coefficients: list[ad.Tensor] | None = None) -> None:
    """Write `{nodes:[{scale,entity}], edges:[[src,dst,weight]]}` for audit."""
    edges = []
    for v, hood in enumerate(graph.neighbors):
        full = hood + [v]
        for j, u in enumerate(full):
            w = float(coefficients[v].value[j]) if coefficients else 1.0 / len(full)
            edges.append([v, u, w])
    payload = {
        "nodes": [{"scale": s, "entity": e} for s, e in nodes],
        "edges": edges,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
