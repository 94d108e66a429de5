"""Iterative prompt-pack construction against a pluggable chat-LLM backend.

The builder discovers one named histological entity at a time (re-querying
with the already-chosen names excluded), collects a generic description
plus one attribute text per subtype for each entity, then summarizes each
subtype at slide level from the collected entity names, and finally asks
for one tumor-region description per scale. A deterministic fixture
backend makes the whole pipeline reproducible offline; the HTTP backend
speaks the common chat-completion wire shape.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import httpx
import jsonschema

from .dataio import SCALES

API_KEY_ENV = "PROMPTMIL_API_KEY"
DEFAULT_RETRIES = 3


class BackendError(RuntimeError):
    """The chat backend failed to produce a usable completion."""


class PromptBuildError(RuntimeError):
    """Pack construction failed; carries any partially built entity pool."""

    def __init__(self, message: str, partial: list[str] | None = None):
        super().__init__(message)
        self.partial = partial or []


def load_templates(path: str | Path | None = None) -> dict[str, str]:
    if path is None:
        text = (resources.files("promptmil") / "templates" / "queries.json").read_text()
    else:
        text = Path(path).read_text()
    templates = json.loads(text)
    missing = {"system", "discover", "generic", "attribute", "slide", "region"} - set(templates)
    if missing:
        raise ValueError(f"template file missing keys: {sorted(missing)}")
    return templates


# ---------------------------------------------------------------------------
# backends


class RecordingBackend:
    """Base class keeping a transcript of (system, user) requests."""

    def __init__(self):
        self.requests: list[tuple[str, str]] = []

    def complete(self, system: str, user: str) -> str:
        self.requests.append((system, user))
        return self._respond(system, user)

    def _respond(self, system: str, user: str) -> str:
        raise NotImplementedError


_FIXTURE_ENTITIES = [
    "nucleolus", "stroma", "gland", "keratinization", "cytoplasm",
    "cell cluster", "vacuole", "mitotic figure", "necrosis",
    "intercellular bridge", "tumor border", "papillae",
    "chromatin", "basement membrane", "lumen", "desmoplasia",
    "lymphocyte infiltrate", "mucin pool", "nest architecture", "vessel",
]

# Curated attribute phrases for the lung-cancer fixture; everything else
# falls back to deterministic generated text.
_FIXTURE_ATTRIBUTES = {
    ("nucleolus", "LUAD"): "small and inconspicuous nucleoli within relatively uniform nuclei",
    ("nucleolus", "LUSC"): "large and prominent nucleoli inside atypical angulated nuclei",
    ("stroma", "LUAD"): "lighter, less dense stroma with delicate fibrous septa",
    ("stroma", "LUSC"): "denser, more collagenized stroma surrounding tumor nests",
    ("keratinization", "LUAD"): "keratinization essentially absent",
    ("keratinization", "LUSC"): "keratin pearls and dense eosinophilic keratinization",
    ("gland", "LUAD"): "well-formed glandular and acinar structures",
    ("gland", "LUSC"): "no true gland formation, solid sheets instead",
}


def _stable_tag(text: str) -> str:
    return hashlib.blake2b(text.encode(), digest_size=4).hexdigest()


class FixtureBackend(RecordingBackend):
    """Offline backend: every completion is a pure function of the request."""

    def __init__(self, vocabulary: list[str] | None = None):
        super().__init__()
        self.vocabulary = list(vocabulary) if vocabulary else list(_FIXTURE_ENTITIES)

    def _respond(self, system: str, user: str) -> str:
        if user.startswith("Suggest a discriminative histological entity"):
            start = user.index("[") + 1
            end = user.index("]")
            excluded = {e.strip() for e in user[start:end].split(",") if e.strip()}
            for name in self.vocabulary:
                if name not in excluded:
                    return name
            raise BackendError("fixture vocabulary exhausted")
        if user.startswith("Describe how "):
            body = user[len("Describe how "):]
            entity = body.split(" appears in subtype ")[0]
            rest = body.split(" appears in subtype ")[1]
            subtype = rest.split(" at scale ")[0]
            scale = rest.split(" at scale ")[1].rstrip(".")
            curated = _FIXTURE_ATTRIBUTES.get((entity, subtype))
            if curated:
                return curated
            return (f"{entity} in {subtype} at {scale} resolution shows a "
                    f"distinctive pattern {_stable_tag(entity + subtype + scale)}")
        if user.startswith("Describe generic visual characteristics of "):
            body = user[len("Describe generic visual characteristics of "):]
            entity = body.split(" at scale ")[0]
            scale = body.split(" at scale ")[1].rstrip(".")
            return (f"{entity} appears as a recurring {scale}-scale structure with "
                    f"characteristic texture {_stable_tag(entity + scale)}")
        if user.startswith("Describe a WSI of "):
            body = user[len("Describe a WSI of "):]
            subtype = body.split(" at scale ")[0]
            rest = body.split(" at scale ")[1]
            scale, context = rest.split(" based on: ", 1)
            return (f"a {subtype} whole slide at {scale} resolution combining "
                    f"{context.rstrip('.')}")
        if user.startswith("What are the visually descriptive characteristics"):
            scale = user.split(" at ")[-1].split(" resolution")[0]
            return (f"hypercellular disorganized tissue with irregular borders and "
                    f"increased nuclear density, typical of tumor regions at {scale} "
                    f"magnification")
        raise BackendError(f"fixture backend cannot answer: {user[:60]}...")


class ScriptedBackend(RecordingBackend):
    """Replays a fixed response sequence; raises when the script runs out."""

    def __init__(self, responses: list[str]):
        super().__init__()
        self._queue = list(responses)

    def _respond(self, system: str, user: str) -> str:
        if not self._queue:
            raise BackendError("scripted backend exhausted")
        return self._queue.pop(0)


class HttpBackend(RecordingBackend):
    """Chat-completion HTTP backend with retry/backoff; decodes at temperature 0."""

    RETRY_STATUS = {429, 500, 502, 503, 504}

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 max_retries: int = DEFAULT_RETRIES, backoff: float = 0.5,
                 timeout: float = 60.0, client: httpx.Client | None = None):
        super().__init__()
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not key:
            raise BackendError(
                f"no API key: pass api_key or set the {API_KEY_ENV} environment variable")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = {"Authorization": f"Bearer {key}"}

    def _respond(self, system: str, user: str) -> str:
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        last_err: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions",
                                         json=payload, headers=self._headers)
            except httpx.HTTPError as err:
                last_err = err
                continue
            if resp.status_code in self.RETRY_STATUS:
                last_err = BackendError(f"HTTP {resp.status_code}: {resp.text[:120]}")
                continue
            if resp.status_code != 200:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:120]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, ValueError) as err:
                raise BackendError(f"malformed completion payload: {err}") from err
        raise BackendError(f"backend gave up after {self.max_retries} retries: {last_err}")


# ---------------------------------------------------------------------------
# pack model


@dataclass
class EntityPrompt:
    name: str
    scale: str
    generic: str
    attributes: dict[str, str]

    def validate(self, subtypes: list[str]) -> None:
        if not self.name or not self.generic:
            raise PromptBuildError(f"entity prompt {self.name!r} has empty text")
        for c in subtypes:
            if not self.attributes.get(c):
                raise PromptBuildError(
                    f"entity {self.name!r} missing attribute for subtype {c!r}")


@dataclass
class ScalePrompts:
    entities: list[EntityPrompt]
    slide_prompts: dict[str, str]
    region_prompt: str


@dataclass
class PromptPack:
    subtypes: list[str]
    scales: dict[str, ScalePrompts] = field(default_factory=dict)

    def validate(self, n_entities: int | None = None) -> None:
        if len(self.subtypes) < 2:
            raise PromptBuildError("a pack needs at least two subtypes")
        for s in SCALES:
            if s not in self.scales:
                raise PromptBuildError(f"pack missing scale {s!r}")
            sp = self.scales[s]
            names = [e.name for e in sp.entities]
            if len(set(names)) != len(names):
                raise PromptBuildError(f"duplicate entity names at scale {s!r}")
            if n_entities is not None and len(names) != n_entities:
                raise PromptBuildError(
                    f"scale {s!r} has {len(names)} entities, expected {n_entities}")
            for e in sp.entities:
                e.validate(self.subtypes)
            for c in self.subtypes:
                if not sp.slide_prompts.get(c):
                    raise PromptBuildError(
                        f"missing slide prompt for subtype {c!r} at scale {s!r}")
            if not sp.region_prompt:
                raise PromptBuildError(f"missing region prompt at scale {s!r}")

    def to_json(self) -> dict:
        return {
            "subtypes": list(self.subtypes),
            "scales": {
                s: {
                    "entities": [{"name": e.name, "generic": e.generic,
                                  "attributes": dict(e.attributes)}
                                 for e in sp.entities],
                    "slide_prompts": dict(sp.slide_prompts),
                    "region_prompt": sp.region_prompt,
                } for s, sp in self.scales.items()
            },
        }

    @classmethod
    def from_json(cls, raw: dict) -> "PromptPack":
        validate_pack_json(raw)
        scales = {}
        for s, sp in raw["scales"].items():
            entities = [EntityPrompt(e["name"], s, e["generic"], dict(e["attributes"]))
                        for e in sp["entities"]]
            scales[s] = ScalePrompts(entities, dict(sp["slide_prompts"]),
                                     sp["region_prompt"])
        return cls(subtypes=list(raw["subtypes"]), scales=scales)


PACK_SCHEMA = {
    "type": "object",
    "required": ["subtypes", "scales"],
    "additionalProperties": False,
    "properties": {
        "subtypes": {"type": "array", "minItems": 2, "items": {"type": "string"}},
        "scales": {
            "type": "object",
            "required": ["low", "high"],
            "additionalProperties": False,
            "properties": {
                s: {
                    "type": "object",
                    "required": ["entities", "slide_prompts", "region_prompt"],
                    "additionalProperties": False,
                    "properties": {
                        "entities": {
                            "type": "array",
                            "minItems": 1,
                            "items": {
                                "type": "object",
                                "required": ["name", "generic", "attributes"],
                                "additionalProperties": False,
                                "properties": {
                                    "name": {"type": "string", "minLength": 1},
                                    "generic": {"type": "string", "minLength": 1},
                                    "attributes": {
                                        "type": "object",
                                        "minProperties": 1,
                                        "additionalProperties": {
                                            "type": "string", "minLength": 1},
                                    },
                                },
                            },
                        },
                        "slide_prompts": {
                            "type": "object",
                            "minProperties": 1,
                            "additionalProperties": {"type": "string", "minLength": 1},
                        },
                        "region_prompt": {"type": "string", "minLength": 1},
                    },
                } for s in SCALES
            },
        },
    },
}


def validate_pack_json(raw: dict) -> None:
    try:
        jsonschema.validate(raw, PACK_SCHEMA)
    except jsonschema.ValidationError as err:
        raise PromptBuildError(f"pack schema violation: {err.message}") from err
    # structural cross-checks the schema alone cannot express
    subtypes = set(raw["subtypes"])
    for s, sp in raw["scales"].items():
        names = [e["name"] for e in sp["entities"]]
        if len(set(names)) != len(names):
            raise PromptBuildError(f"duplicate entity names at scale {s!r}")
        for e in sp["entities"]:
            if set(e["attributes"]) != subtypes:
                raise PromptBuildError(
                    f"entity {e['name']!r} attributes do not cover all subtypes")
        if set(sp["slide_prompts"]) != subtypes:
            raise PromptBuildError(f"slide prompts at scale {s!r} do not cover all subtypes")


# ---------------------------------------------------------------------------
# construction operations


def _ask(backend, templates: dict[str, str], key: str, retries: int = DEFAULT_RETRIES,
         **slots) -> str:
    user = templates[key].format(**slots)
    last: Exception | None = None
    for _ in range(retries + 1):
        try:
            text = backend.complete(templates["system"], user).strip()
        except BackendError as err:
            last = err
            continue
        if text:
            return text
        last = BackendError("empty completion")
    raise BackendError(f"query {key!r} failed after {retries} retries: {last}")


def discover_entities(subtypes: list[str], scale: str, n_entities: int, backend,
                      templates: dict[str, str] | None = None,
                      retries: int = DEFAULT_RETRIES) -> list[str]:
    """Grow a unique entity-name pool one query at a time, excluding names
    already chosen; duplicates and failures consume the per-slot retry budget."""
    if n_entities < 1:
        raise ValueError("n_entities must be >= 1")
    templates = templates or load_templates()
    pool: list[str] = []
    while len(pool) < n_entities:
        budget = retries
        while True:
            try:
                name = _ask(backend, templates, "discover", retries=0,
                            exclude=", ".join(pool) if pool else "none",
                            subtypes=", ".join(subtypes), scale=scale)
            except BackendError as err:
                if budget == 0:
                    raise PromptBuildError(
                        f"entity discovery stalled at {len(pool)}/{n_entities}: {err}",
                        partial=pool) from err
                budget -= 1
                continue
            name = name.strip().strip(".")
            if name and name not in pool:
                pool.append(name)
                break
            if budget == 0:
                raise PromptBuildError(
                    f"duplicate entity {name!r} exhausted the retry budget",
                    partial=pool)
            budget -= 1
    return pool


def describe_entity(entity: str, scale: str, subtypes: list[str], backend,
                    templates: dict[str, str] | None = None,
                    retries: int = DEFAULT_RETRIES) -> EntityPrompt:
    if not entity:
        raise ValueError("entity name must be non-empty")
    templates = templates or load_templates()
    generic = _ask(backend, templates, "generic", retries=retries,
                   entity=entity, scale=scale)
    attributes = {c: _ask(backend, templates, "attribute", retries=retries,
                          entity=entity, subtype=c, scale=scale)
                  for c in subtypes}
    prompt = EntityPrompt(name=entity, scale=scale, generic=generic,
                          attributes=attributes)
    prompt.validate(subtypes)
    return prompt


def summarize_slide(subtype: str, scale: str, entity_prompts: list[EntityPrompt],
                    backend, templates: dict[str, str] | None = None,
                    retries: int = DEFAULT_RETRIES) -> str:
    if not entity_prompts:
        raise ValueError("entity_prompts must be non-empty")
    templates = templates or load_templates()
    context = ", ".join(e.name for e in entity_prompts)
    return _ask(backend, templates, "slide", retries=retries,
                subtype=subtype, scale=scale, context=context)


def region_prompt(scale: str, backend, templates: dict[str, str] | None = None,
                  retries: int = DEFAULT_RETRIES) -> str:
    templates = templates or load_templates()
    return _ask(backend, templates, "region", retries=retries, scale=scale)


def build_prompt_pack(subtypes: list[str], n_entities: int, backend,
                      templates: dict[str, str] | None = None,
                      retries: int = DEFAULT_RETRIES) -> PromptPack:
    if len(subtypes) < 2:
        raise ValueError("at least two subtypes required")
    templates = templates or load_templates()
    pack = PromptPack(subtypes=list(subtypes))
    for scale in SCALES:
        names = discover_entities(subtypes, scale, n_entities, backend,
                                  templates, retries)
        entities = [describe_entity(n, scale, subtypes, backend, templates, retries)
                    for n in names]
        slide_prompts = {c: summarize_slide(c, scale, entities, backend,
                                            templates, retries)
                         for c in subtypes}
        region = region_prompt(scale, backend, templates, retries)
        pack.scales[scale] = ScalePrompts(entities, slide_prompts, region)
    pack.validate(n_entities=n_entities)
    return pack


def save_pack(pack: PromptPack, path: str | Path) -> None:
    raw = pack.to_json()
    validate_pack_json(raw)
    with open(path, "w") as fh:
        json.dump(raw, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_pack(path: str | Path) -> PromptPack:
    with open(path) as fh:
        return PromptPack.from_json(json.load(fh))
