"""Training loop: accumulated full-batch steps, decoupled-weight-decay
adaptive updates, early stopping on validation loss.

Every few-shot training slide contributes to one accumulated gradient per
epoch, which removes batch-order nondeterminism; with a fixed seed two
runs produce bit-identical parameter trajectories. The best-validation
parameters are restored at the end.
"""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .dataio import DatasetManifest, FewShotSplit, load_feature_bag
from .metrics import AucUndefinedError, compute_metrics
from .model import ModelParams, cross_entropy, forward_slide, init_params
from .prompts import PromptPack
from .selection import select_instances
from .textenc import FrozenTextEncoder, PromptEmbeddings, encode_pack


class DivergenceError(RuntimeError):
    """Training reached a non-finite loss; message carries epoch diagnostics."""


class AdamW:
    """Adam with decoupled weight decay. Temperatures are exempt from decay."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            g = g.astype(p.value.dtype)
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            m_hat = m / (1.0 - self.b1 ** self.t)
            v_hat = v / (1.0 - self.b2 ** self.t)
            p.value -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.value.dtype)
            if self.weight_decay and not name.startswith("tau"):
                p.value -= (self.lr * self.weight_decay) * p.value


class EmbeddingProvider:
    """Supplies prompt embeddings per epoch plus the constant region vectors."""

    def current(self) -> PromptEmbeddings:
        raise NotImplementedError

    def region(self, scale: str) -> np.ndarray:
        raise NotImplementedError


class BundleProvider(EmbeddingProvider):
    """Precomputed embeddings; context vectors receive no gradient here."""

    def __init__(self, embeds: PromptEmbeddings, n_entities: int):
        self._embeds = PromptEmbeddings(
            dim=embeds.dim, subtypes=list(embeds.subtypes),
            scales={s: se.truncated(min(n_entities, len(se.entities)))
                    for s, se in embeds.scales.items()})
        for s, se in embeds.scales.items():
            if len(se.entities) < n_entities:
                raise ValueError(
                    f"bundle has {len(se.entities)} entities at scale {s!r}, "
                    f"config wants {n_entities}")

    def current(self) -> PromptEmbeddings:
        return self._embeds

    def region(self, scale: str) -> np.ndarray:
        return self._embeds.scales[scale].region


class PackProvider(EmbeddingProvider):
    """Encodes a prompt pack through the frozen stub each epoch so gradients
    reach the context vectors."""

    def __init__(self, pack: PromptPack, encoder: FrozenTextEncoder,
                 params: ModelParams, n_entities: int):
        self.pack = copy.deepcopy(pack)
        for s, sp in self.pack.scales.items():
            if len(sp.entities) < n_entities:
                raise ValueError(
                    f"pack has {len(sp.entities)} entities at scale {s!r}, "
                    f"config wants {n_entities}")
            sp.entities = sp.entities[:n_entities]
        self.encoder = encoder
        self.params = params
        self._regions = {
            s: encoder.encode_text(None, sp.region_prompt).value.astype(np.float64)
            for s, sp in self.pack.scales.items()}

    def current(self) -> PromptEmbeddings:
        return encode_pack(self.pack, self.encoder, self.params.context,
                           self.params.context_slide)

    def region(self, scale: str) -> np.ndarray:
        return self._regions[scale]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochStats]
    best_epoch: int
    stopped_early: bool


@dataclass
class SlideSet:
    """Bags and cached selections for a list of slide ids."""

    ids: list[str]
    labels: dict[str, int]
    bags: dict[str, dict]
    selections: dict[str, dict] = field(default_factory=dict)


def load_slide_set(manifest: DatasetManifest, ids: list[str],
                   config: RunConfig, provider: EmbeddingProvider) -> SlideSet:
    labels, bags, selections = {}, {}, {}
    for sid in ids:
        entry = manifest.by_id(sid)
        labels[sid] = entry.label
        bags[sid] = {}
        selections[sid] = {}
        for s in config.enabled_scales:
            bag = load_feature_bag(manifest.bag_path(entry, s), manifest.dim,
                                   slide_id=sid, scale=s)
            bags[sid][s] = bag
            selections[sid][s] = select_instances(provider.region(s), bag,
                                                  config.effective_ratio)
    return SlideSet(ids=list(ids), labels=labels, bags=bags, selections=selections)


def _evaluate(params: ModelParams, slides: SlideSet, embeds: PromptEmbeddings,
              config: RunConfig) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Mean loss, macro AUC (nan if undefined), probabilities, labels."""
    probs, labels, losses = [], [], []
    for sid in slides.ids:
        out = forward_slide(params, slides.bags[sid], embeds, config,
                            slides.selections[sid])
        losses.append(float(cross_entropy(out, slides.labels[sid]).value))
        probs.append(out.probabilities.value.astype(np.float64))
        labels.append(slides.labels[sid])
    probs_arr = np.stack(probs)
    labels_arr = np.asarray(labels)
    try:
        auc = compute_metrics(probs_arr, labels_arr).auc
    except (AucUndefinedError, ValueError):
        auc = float("nan")
    return float(np.mean(losses)), auc, probs_arr, labels_arr


def train(manifest: DatasetManifest, split: FewShotSplit,
          provider: EmbeddingProvider, params: ModelParams,
          config: RunConfig) -> TrainResult:
    if not split.train:
        raise ValueError("training split is empty")
    train_set = load_slide_set(manifest, split.train, config, provider)
    val_set = load_slide_set(manifest, split.val, config, provider) if split.val else None

    trainables = params.trainables()
    optimizer = AdamW(trainables, lr=config.lr, betas=config.betas,
                      eps=config.adam_eps, weight_decay=config.weight_decay)
    history: list[EpochStats] = []
    best_loss = np.inf
    best_epoch = -1
    best_values = params.copy_values()
    stale = 0
    stopped_early = False

    for epoch in range(config.max_epochs):
        ad.zero_grads(list(trainables.values()))
        with ad.Tape() as tape:
            embeds = provider.current()
            total = None
            for sid in train_set.ids:
                out = forward_slide(params, train_set.bags[sid], embeds, config,
                                    train_set.selections[sid])
                term = cross_entropy(out, train_set.labels[sid])
                total = term if total is None else ad.add(total, term)
            mean_loss = ad.scale(total, 1.0 / len(train_set.ids))
        train_loss = float(mean_loss.value)
        if not np.isfinite(train_loss):
            raise DivergenceError(
                f"non-finite training loss at epoch {epoch} "
                f"(last finite epoch: {history[-1].train_loss if history else 'none'})")
        tape.backward(mean_loss)
        optimizer.step()
        params.clamp_temperatures()

        if val_set is not None:
            eval_embeds = provider.current()
            val_loss, val_auc, _, _ = _evaluate(params, val_set, eval_embeds, config)
        else:
            val_loss, val_auc = train_loss, float("nan")
        history.append(EpochStats(epoch, train_loss, val_loss, val_auc))

        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_values = params.copy_values()
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                stopped_early = True
                break

    params.load_values(best_values)
    return TrainResult(params=params, history=history, best_epoch=best_epoch,
                       stopped_early=stopped_early)


def evaluate(manifest: DatasetManifest, ids: list[str],
             provider: EmbeddingProvider, params: ModelParams,
             config: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and labels for a list of slide ids."""
    slide_set = load_slide_set(manifest, ids, config, provider)
    embeds = provider.current()
    _, _, probs, labels = _evaluate(params, slide_set, embeds, config)
    return probs, labels


def write_history_csv(history: list[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_auc"])
        for h in history:
            writer.writerow([h.epoch, f"{h.train_loss:.8f}", f"{h.val_loss:.8f}",
                             f"{h.val_auc:.8f}"])


def make_provider(config: RunConfig, dim: int, params: ModelParams,
                  pack: PromptPack | None = None,
                  bundle: PromptEmbeddings | None = None) -> EmbeddingProvider:
    if (pack is None) == (bundle is None):
        raise ValueError("exactly one of pack or bundle must be given")
    if pack is not None:
        encoder = FrozenTextEncoder(dim, seed=config.encoder_seed,
                                    dtype=params.context.dtype)
        return PackProvider(pack, encoder, params, config.n_entities)
    return BundleProvider(bundle, config.n_entities)


def init_and_train(manifest: DatasetManifest, split: FewShotSplit,
                   config: RunConfig, pack: PromptPack | None = None,
                   bundle: PromptEmbeddings | None = None,
                   dtype=np.float32) -> tuple[TrainResult, EmbeddingProvider]:
    params = init_params(manifest.dim, config, dtype=dtype)
    provider = make_provider(config, manifest.dim, params, pack, bundle)
    result = train(manifest, split, provider, params, config)
    return result, provider
