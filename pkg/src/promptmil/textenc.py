"""Prompt texts to unit embedding vectors, with trainable context mixed in.

A deterministic stub stands in for the frozen transformer text encoder:
whitespace tokens map through a seeded hash to fixed near-unit Gaussian
vectors, the trainable context rows are prepended, and the pooled result
passes through a frozen linear map, layer norm, and L2 normalization.
Gradients reach only the context vectors. Region prompts are encoded
without context so instance selection stays parameter-free and cacheable.

Users with a real encoder can instead load a precomputed embedding bundle
(MAPF matrices plus a JSON index); context vectors are inference-only on
that path.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataio import SCALES, read_matrix

DEFAULT_CONTEXT_LENGTH = 16
CONTEXT_INIT_STD = 0.02


def init_context_vectors(dim: int, length: int = DEFAULT_CONTEXT_LENGTH,
                         rng: np.random.Generator | None = None,
                         dtype=np.float32) -> ad.Tensor:
    """Trainable context rows, i.i.d. Gaussian with std 0.02."""
    if length < 1:
        raise ValueError("at least one context vector is required")
    rng = rng or np.random.default_rng(0)
    return ad.parameter(CONTEXT_INIT_STD * rng.standard_normal((length, dim)),
                        dtype=dtype)


class FrozenTextEncoder:
    """Deterministic stand-in for a frozen text encoder.

    Token vectors and the pooling projection are pure functions of the
    encoder seed; they never receive gradients.
    """

    def __init__(self, dim: int, seed: int = 0, dtype=np.float32):
        self.dim = dim
        self.seed = int(seed)
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x7E57]))
        w = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        self._w_pool = ad.Tensor(w.astype(dtype))
        self._token_cache: dict[str, np.ndarray] = {}

    def snapshot(self) -> bytes:
        return self._w_pool.value.tobytes()

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            h = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(),
                               "little")
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, h]))
            vec = (rng.standard_normal(self.dim) / np.sqrt(self.dim)).astype(self.dtype)
            self._token_cache[token] = vec
        return vec

    def tokenize_embed(self, text: str) -> np.ndarray:
        tokens = text.lower().split()
        if not tokens:
            raise ValueError("cannot embed empty text")
        return np.stack([self.token_vector(t) for t in tokens])

    def encode_prompt(self, context: ad.Tensor | None, tokens: np.ndarray) -> ad.Tensor:
        """Mean-pool context rows plus token rows, project, normalize."""
        if tokens.ndim != 2 or tokens.shape[0] == 0:
            raise ValueError("tokens must be a non-empty T x d matrix")
        token_rows = ad.Tensor(tokens.astype(self.dtype))
        if context is not None:
            rows = ad.concat_rows([context, token_rows])
        else:
            rows = token_rows
        pooled = ad.mean_rows(rows)
        projected = ad.vecmat(pooled, self._w_pool)
        return ad.l2_normalize(ad.layer_norm(projected))

    def encode_text(self, context: ad.Tensor | None, text: str) -> ad.Tensor:
        return self.encode_prompt(context, self.tokenize_embed(text))


@dataclass
class ScaleEmbeddings:
    """Per-scale prompt embeddings in subtype/entity order.

    generic: E x d matrix (one row per entity); attributes: per entity one
    C x d matrix in subtype order; slide: C x d matrix; region: plain unit
    vector (no context mixed in, usable before any parameter exists).
    """

    entities: list[str]
    generic: ad.Tensor
    attributes: list[ad.Tensor]
    slide: ad.Tensor
    region: np.ndarray

    def truncated(self, n_entities: int) -> "ScaleEmbeddings":
        if self.generic.requires_grad:
            raise ValueError("cannot truncate gradient-carrying embeddings; "
                             "truncate the prompt pack before encoding instead")
        if not 1 <= n_entities <= len(self.entities):
            raise ValueError(
                f"cannot take {n_entities} entities from a pool of {len(self.entities)}")
        generic = ad.Tensor(self.generic.value[:n_entities].copy())
        return ScaleEmbeddings(self.entities[:n_entities], generic,
                               self.attributes[:n_entities], self.slide, self.region)


@dataclass
class PromptEmbeddings:
    dim: int
    subtypes: list[str]
    scales: dict[str, ScaleEmbeddings]


def encode_pack(pack, encoder: FrozenTextEncoder,
                context_entity: ad.Tensor,
                context_slide: ad.Tensor | None = None) -> PromptEmbeddings:
    """Encode every pack entry. One context set is shared across entity and
    slide prompts unless a separate slide set is supplied."""
    if context_slide is None:
        context_slide = context_entity
    scales: dict[str, ScaleEmbeddings] = {}
    for s in SCALES:
        sp = pack.scales[s]
        generic = ad.stack_rows(
            [encoder.encode_text(context_entity, e.generic) for e in sp.entities])
        attributes = [
            ad.stack_rows([encoder.encode_text(context_entity, e.attributes[c])
                           for c in pack.subtypes])
            for e in sp.entities
        ]
        slide = ad.stack_rows(
            [encoder.encode_text(context_slide, sp.slide_prompts[c])
             for c in pack.subtypes])
        region = encoder.encode_text(None, sp.region_prompt).value.astype(np.float64)
        scales[s] = ScaleEmbeddings([e.name for e in sp.entities], generic,
                                    attributes, slide, region)
    return PromptEmbeddings(dim=encoder.dim, subtypes=list(pack.subtypes),
                            scales=scales)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("embedding bundle contains a zero row")
    return m / norms


def load_embedding_bundle(index_path: str | Path, dtype=np.float32) -> PromptEmbeddings:
    """Load precomputed prompt embeddings (rows renormalized to unit length)."""
    index_path = Path(index_path)
    with open(index_path) as fh:
        index = json.load(fh)
    root = index_path.parent
    dim = int(index["dim"])
    subtypes = list(index["subtypes"])
    scales: dict[str, ScaleEmbeddings] = {}
    for s in SCALES:
        entry = index["scales"][s]
        names = list(entry["entities"])
        generic = _unit_rows(read_matrix(root / entry["generic"], expected_dim=dim))
        attrs = _unit_rows(read_matrix(root / entry["attributes"], expected_dim=dim))
        slide = _unit_rows(read_matrix(root / entry["slide"], expected_dim=dim))
        region = _unit_rows(read_matrix(root / entry["region"], expected_dim=dim))[0]
        if generic.shape[0] != len(names):
            raise ValueError(f"{s}: generic rows != entity count")
        if attrs.shape[0] != len(names) * len(subtypes):
            raise ValueError(f"{s}: attribute rows != entities x subtypes")
        if slide.shape[0] != len(subtypes):
            raise ValueError(f"{s}: slide rows != subtype count")
        n_sub = len(subtypes)
        gen_t = ad.Tensor(generic.astype(dtype))
        attr_t = [ad.Tensor(attrs[i * n_sub:(i + 1) * n_sub].astype(dtype))
                  for i in range(len(names))]
        slide_t = ad.Tensor(slide.astype(dtype))
        scales[s] = ScaleEmbeddings(names, gen_t, attr_t, slide_t,
                                    region.astype(np.float64))
    return PromptEmbeddings(dim=dim, subtypes=subtypes, scales=scales)
