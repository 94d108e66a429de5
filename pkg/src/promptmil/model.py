"""Full forward pass: selection -> entity attention -> entity logits ->
cross-scale graph -> gated pooling -> slide logits -> fused prediction.

Fusion is a convex combination of two premeaned endpoint vectors (the
scale-mean of slide logits and the scale-mean of per-scale entity-logit
averages), which keeps the combination affine in the weighting factor to
the bit. A learnable temperature divides the fused logits before softmax;
cosine logits live in [-1, 1] and need it to express confidence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import json

import numpy as np

from . import autodiff as ad
from .aggregator import (EntityGraph, GatParams, GatedPoolParams,
                         build_entity_graph, gat_update, gated_attention_pool,
                         init_gat_params, init_pool_params, slide_logits)
from .config import RunConfig
from .dataio import FeatureBag, read_matrix, substream, write_matrix
from .entity_head import (AttentionParams, entity_cross_attention, entity_logits,
                          init_attention_params, project_instances)
from .selection import SelectionResult, select_instances
from .textenc import PromptEmbeddings, init_context_vectors

TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 1.0
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    context: ad.Tensor
    context_slide: ad.Tensor | None
    attention: AttentionParams
    gat: GatParams
    pool: GatedPoolParams
    tau: ad.Tensor
    tau_slide: ad.Tensor | None = None

    def trainables(self) -> dict[str, ad.Tensor]:
        out = {"context": self.context}
        if self.context_slide is not None:
            out["context_slide"] = self.context_slide
        out.update(self.attention.trainables())
        out.update(self.gat.trainables())
        out.update(self.pool.trainables())
        out["tau"] = self.tau
        if self.tau_slide is not None:
            out["tau_slide"] = self.tau_slide
        return out

    def clamp_temperatures(self) -> None:
        for t in (self.tau, self.tau_slide):
            if t is not None:
                np.clip(t.value, TAU_MIN, TAU_MAX, out=t.value)

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.trainables().items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.trainables().items():
            t.value = values[name].copy()


def init_params(dim: int, config: RunConfig, dtype=np.float32) -> ModelParams:
    rng = substream(config.seed, "init")
    context = init_context_vectors(dim, config.context_length, rng, dtype)
    context_slide = (init_context_vectors(dim, config.context_length, rng, dtype)
                     if config.separate_context else None)
    params = ModelParams(
        context=context,
        context_slide=context_slide,
        attention=init_attention_params(dim, rng, dtype),
        gat=init_gat_params(dim, rng, dtype),
        pool=init_pool_params(dim, rng, dtype),
        tau=ad.parameter(np.asarray(TAU_INIT), dtype=dtype),
        tau_slide=(ad.parameter(np.asarray(TAU_INIT), dtype=dtype)
                   if config.per_branch_temperature else None),
    )
    return params


@dataclass
class ScaleTrace:
    entity_names: list[str]
    entity_logits: ad.Tensor            # E x C (stacked rows)
    entity_logit_mean: ad.Tensor        # C
    slide_logits: ad.Tensor             # C
    attention_weights: list[ad.Tensor | None]
    pool_weights: ad.Tensor
    selection: SelectionResult


@dataclass
class SlideOutput:
    scales: dict[str, ScaleTrace]
    fused: ad.Tensor                    # C, raw convex combination
    scaled: ad.Tensor                   # C, temperature-scaled logits
    probabilities: ad.Tensor            # C, softmax of the scaled logits
    graph: EntityGraph | None
    gat_coefficients: list[ad.Tensor] | None
    node_labels: list[tuple[str, str]] = field(default_factory=list)


def _mean_of(vectors: list[ad.Tensor]) -> ad.Tensor:
    total = vectors[0]
    for v in vectors[1:]:
        total = ad.add(total, v)
    return ad.scale(total, 1.0 / len(vectors))


def fuse_logits(entity_means: dict[str, ad.Tensor], slide: dict[str, ad.Tensor],
                lam: float, scales: tuple[str, ...]) -> ad.Tensor:
    """Scale-mean of slide logits, convexly combined with the scale-mean of
    entity-logit averages. Affine in lam by construction."""
    if not scales:
        raise ValueError("at least one scale required for fusion")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    slide_endpoint = _mean_of([slide[s] for s in scales])
    entity_endpoint = _mean_of([entity_means[s] for s in scales])
    return ad.add(ad.scale(slide_endpoint, lam), ad.scale(entity_endpoint, 1.0 - lam))


def forward_slide(params: ModelParams, bags: dict[str, FeatureBag],
                  embeds: PromptEmbeddings, config: RunConfig,
                  selections: dict[str, SelectionResult] | None = None,
                  topology: EntityGraph | None = None) -> SlideOutput:
    """Run the full pipeline for one slide, honoring ablation flags.

    selections: optional per-scale cached selection (recomputed when absent).
    topology: optional fixed entity graph (otherwise rebuilt from current
    feature values; the rebuild is a non-differentiable discrete choice).
    """
    enabled = config.enabled_scales
    for s in enabled:
        if s not in bags:
            raise ValueError(f"missing feature bag for enabled scale {s!r}")
    dtype = params.context.dtype

    per_scale: dict[str, dict] = {}
    node_features: list[ad.Tensor] = []
    node_labels: list[tuple[str, str]] = []
    for s in enabled:
        se = embeds.scales[s]
        bag = bags[s]
        sel = (selections or {}).get(s)
        if sel is None:
            sel = select_instances(se.region, bag, config.effective_ratio)
        kept = ad.Tensor(bag.features[sel.kept].astype(dtype))
        keys, values = project_instances(kept, params.attention)
        queries = (None if config.no_egca
                   else ad.matmul(se.generic, params.attention.w_q))
        feats, logit_rows, attn = [], [], []
        for i, name in enumerate(se.entities):
            ef = entity_cross_attention(
                ad.get_row(se.generic, i), keys, values, params.attention,
                entity=name, scale=s,
                query=None if queries is None else ad.get_row(queries, i),
                use_attention=not config.no_egca,
                norm_after_residual=config.norm_after_residual)
            feats.append(ef.feature)
            attn.append(ef.weights)
            logit_rows.append(entity_logits(ef.feature, se.attributes[i]))
        per_scale[s] = {"sel": sel, "feats": feats, "logit_rows": logit_rows,
                        "attn": attn, "names": list(se.entities)}
        node_features.extend(feats)
        node_labels.extend((s, n) for n in se.entities)

    graph = None
    coefficients = None
    if not config.no_graph and len(node_features) >= 2:
        graph = topology if topology is not None else build_entity_graph(
            [t.value for t in node_features], config.n_neighbors)
        refined, coefficients = gat_update(node_features, graph, params.gat)
    else:
        refined = node_features

    offset = 0
    scale_traces: dict[str, ScaleTrace] = {}
    entity_means: dict[str, ad.Tensor] = {}
    slide_vecs: dict[str, ad.Tensor] = {}
    for s in enabled:
        info = per_scale[s]
        n = len(info["feats"])
        scale_refined = refined[offset:offset + n]
        offset += n
        pooled, pool_w = gated_attention_pool(scale_refined, params.pool)
        s_logits = slide_logits(pooled, embeds.scales[s].slide)
        e_mean = _mean_of(info["logit_rows"])
        entity_means[s] = e_mean
        slide_vecs[s] = s_logits
        scale_traces[s] = ScaleTrace(
            entity_names=info["names"],
            entity_logits=ad.stack_rows(info["logit_rows"]),
            entity_logit_mean=e_mean,
            slide_logits=s_logits,
            attention_weights=info["attn"],
            pool_weights=pool_w,
            selection=info["sel"],
        )

    fused = fuse_logits(entity_means, slide_vecs, config.effective_lambda, enabled)
    if config.per_branch_temperature and params.tau_slide is not None:
        # separate temperatures per branch; with tau_slide == tau this
        # reduces to dividing the fused logits, since fusion is linear
        slide_end = _mean_of([slide_vecs[s] for s in enabled])
        entity_end = _mean_of([entity_means[s] for s in enabled])
        scaled = ad.add(
            ad.scale(ad.div_by_scalar(slide_end, params.tau_slide),
                     config.effective_lambda),
            ad.scale(ad.div_by_scalar(entity_end, params.tau),
                     1.0 - config.effective_lambda))
    else:
        scaled = ad.div_by_scalar(fused, params.tau)
    probabilities = ad.softmax(scaled)
    return SlideOutput(scales=scale_traces, fused=fused, scaled=scaled,
                       probabilities=probabilities, graph=graph,
                       gat_coefficients=coefficients, node_labels=node_labels)


def cross_entropy(output: SlideOutput, label: int) -> ad.Tensor:
    """Negative log-probability of the true class from the temperature-scaled
    fused logits, in log-sum-exp form."""
    n_classes = output.fused.shape[0]
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} out of range for {n_classes} classes")
    return ad.sub(ad.log_sum_exp(output.scaled), ad.pick(output.scaled, label))


def predict(params: ModelParams, bags: dict[str, FeatureBag],
            embeds: PromptEmbeddings, config: RunConfig,
            selections: dict[str, SelectionResult] | None = None) -> np.ndarray:
    """Class probabilities for one slide (no gradient tracking)."""
    out = forward_slide(params, bags, embeds, config, selections)
    return out.probabilities.value.copy()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = {}
    for name, t in params.trainables().items():
        v = t.value
        mat = v.reshape(1, -1) if v.ndim < 2 else v
        fname = f"{name}.mapf"
        write_matrix(out / fname, mat)
        names[name] = {"file": fname, "shape": list(v.shape)}
    index = {"version": CHECKPOINT_VERSION, "params": names}
    with open(out / "index.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(params: ModelParams, ckpt_dir: str | Path) -> None:
    """Load stored values into an already-initialized parameter set."""
    ckpt = Path(ckpt_dir)
    with open(ckpt / "index.json") as fh:
        index = json.load(fh)
    if index.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {index.get('version')}")
    stored = index["params"]
    own = params.trainables()
    if set(stored) != set(own):
        raise ValueError(
            f"checkpoint parameters {sorted(stored)} do not match model "
            f"parameters {sorted(own)}")
    for name, meta in stored.items():
        mat = read_matrix(ckpt / meta["file"])
        shape = tuple(meta["shape"])
        own[name].value = mat.reshape(shape).astype(own[name].dtype)
