"""Feature-bag files, dataset manifests, few-shot splits, synthetic data.

Feature files use the MAPF container: magic ``MAPF``, u32 version (=1),
u32 rows, u32 cols (all little-endian), then rows*cols float32
little-endian values in row-major order. The format round-trips
bit-exactly and is trivially parseable from any language.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAPF_MAGIC = b"MAPF"
MAPF_VERSION = 1
_HEADER = struct.Struct("<4sIII")

SCALES = ("low", "high")


class FeatureFileError(ValueError):
    """Malformed MAPF payload (bad magic/version, truncation, wrong shape)."""


class DimensionMismatchError(FeatureFileError):
    """Stored column count disagrees with the expected feature dimension."""


class NonFiniteDataError(FeatureFileError):
    """NaN or Inf encountered in a feature payload."""


class SplitError(ValueError):
    """A few-shot split cannot be drawn from the manifest."""


@dataclass
class FeatureBag:
    """One slide's instance embeddings at one scale (K x d)."""

    slide_id: str
    scale: str
    features: np.ndarray

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("feature bag must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(self.features)):
            raise NonFiniteDataError(f"bag {self.slide_id}/{self.scale} has non-finite values")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class SlideEntry:
    slide_id: str
    label: int
    path_low: str
    path_high: str


@dataclass
class DatasetManifest:
    classes: list[str]
    dim: int
    slides: list[SlideEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for s in self.slides:
            if s.slide_id in seen:
                raise ValueError(f"duplicate slide id {s.slide_id!r}")
            seen.add(s.slide_id)
            if not 0 <= s.label < len(self.classes):
                raise ValueError(f"label {s.label} out of range for slide {s.slide_id!r}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def by_id(self, slide_id: str) -> SlideEntry:
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(slide_id)

    def ids_for_class(self, label: int) -> list[str]:
        return [s.slide_id for s in self.slides if s.label == label]

    def bag_path(self, entry: SlideEntry, scale: str) -> Path:
        rel = entry.path_low if scale == "low" else entry.path_high
        return self.root / rel


@dataclass
class FewShotSplit:
    seed: int
    shots: int
    train: list[str]
    val: list[str]
    test: list[str]


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("only 2-D matrices are stored")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAPF_MAGIC, MAPF_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes(order="C"))


def read_matrix(path: str | Path, expected_dim: int | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FeatureFileError(f"{path}: truncated header")
        magic, version, rows, cols = _HEADER.unpack(head)
        if magic != MAPF_MAGIC:
            raise FeatureFileError(f"{path}: bad magic {magic!r}")
        if version != MAPF_VERSION:
            raise FeatureFileError(f"{path}: unsupported version {version}")
        if rows == 0 or cols == 0:
            raise FeatureFileError(f"{path}: empty matrix ({rows}x{cols})")
        if expected_dim is not None and cols != expected_dim:
            raise DimensionMismatchError(
                f"{path}: has {cols} columns, expected {expected_dim}")
        payload = fh.read(4 * rows * cols)
        if len(payload) < 4 * rows * cols:
            raise FeatureFileError(f"{path}: truncated payload")
    m = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    if not np.all(np.isfinite(m)):
        raise NonFiniteDataError(f"{path}: non-finite values in payload")
    return m.copy()


def load_feature_bag(path: str | Path, expected_dim: int, slide_id: str = "",
                     scale: str = "low") -> FeatureBag:
    m = read_matrix(path, expected_dim=expected_dim)
    return FeatureBag(slide_id=slide_id or Path(path).stem, scale=scale, features=m)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    slides = [SlideEntry(s["id"], int(s["label"]), s["path_low"], s["path_high"])
              for s in raw["slides"]]
    return DatasetManifest(classes=list(raw["classes"]), dim=int(raw["dim"]),
                           slides=slides, root=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    raw = {
        "classes": manifest.classes,
        "dim": manifest.dim,
        "slides": [{"id": s.slide_id, "label": s.label,
                    "path_low": s.path_low, "path_high": s.path_high}
                   for s in manifest.slides],
    }
    with open(path, "w") as fh:
        json.dump(raw, fh, indent=1, sort_keys=True)
        fh.write("\n")


def substream(seed: int, name: str) -> np.random.Generator:
    """Named deterministic RNG stream derived from one root seed."""
    return np.random.default_rng(np.random.SeedSequence(
        entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),)))


def sample_few_shot(manifest: DatasetManifest, shots: int, seed: int,
                    allow_short_class: bool = False) -> FewShotSplit:
    """Per class: `shots` slides for training, min(shots, remaining) for
    validation, the rest for test. Deterministic in (manifest, shots, seed)."""
    if shots < 1:
        raise SplitError(f"shots must be >= 1, got {shots}")
    rng = substream(seed, "split")
    train: list[str] = []
    val: list[str] = []
    test: list[str] = []
    for label, name in enumerate(manifest.classes):
        ids = manifest.ids_for_class(label)
        if not ids:
            raise SplitError(f"class {name!r} has no slides")
        if len(ids) < shots and not allow_short_class:
            raise SplitError(
                f"class {name!r} has {len(ids)} slides, fewer than {shots} shots "
                f"(pass allow_short_class to take all available)")
        order = list(rng.permutation(len(ids)))
        shuffled = [ids[i] for i in order]
        k = min(shots, len(shuffled))
        train.extend(shuffled[:k])
        rest = shuffled[k:]
        v = min(shots, len(rest))
        val.extend(rest[:v])
        test.extend(rest[v:])
    return FewShotSplit(seed=seed, shots=shots, train=train, val=val, test=test)


def build_cv_repeats(manifest: DatasetManifest, shots: int, n_repeats: int,
                     base_seed: int, allow_short_class: bool = False) -> list[FewShotSplit]:
    if n_repeats < 1:
        raise SplitError(f"n_repeats must be >= 1, got {n_repeats}")
    return [sample_few_shot(manifest, shots, base_seed + i, allow_short_class)
            for i in range(n_repeats)]


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass
class SyntheticSpec:
    n_classes: int = 3
    n_entities: int = 8
    instances_per_bag: int = 48
    bags_per_class: int = 40
    separation: float = 6.0
    dim: int = 256
    noise_sigma: float = 0.15
    tumor_fraction: float = 0.75

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("at least two classes required")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_synthetic(spec: SyntheticSpec, seed: int, out_dir: str | Path) -> Path:
    """Write a two-scale synthetic dataset plus planted prompt-embedding
    fixtures under out_dir; returns the manifest path.

    Instances of class c for entity e at scale s cluster around
    anchor(e,s) + separation * sigma * offset(c,e,s); the planted attribute
    embedding for (e,c,s) is the normalized cluster mean, the generic
    embedding is the normalized anchor, the slide embedding the normalized
    mean of class cluster means, and the region embedding the normalized
    anchor mean. Background (non-tumor) instances share one class-free
    direction per scale so separation 0 removes every class signal.
    """
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    emb_dir = out / "embeddings"
    emb_dir.mkdir(parents=True, exist_ok=True)
    rng = substream(seed, "synthetic")
    d = spec.dim
    C, E = spec.n_classes, spec.n_entities

    anchors = {}       # (scale, e) -> unit vector
    class_means = {}   # (scale, e, c) -> vector
    background = {}
    for s in SCALES:
        for e in range(E):
            anchors[(s, e)] = _unit(rng.standard_normal(d))
        background[s] = _unit(rng.standard_normal(d))
        for e in range(E):
            for c in range(C):
                off = _unit(rng.standard_normal(d))
                class_means[(s, e, c)] = (anchors[(s, e)]
                                          + spec.separation * spec.noise_sigma * off)

    index = {"dim": d, "subtypes": [f"class_{c}" for c in range(C)], "scales": {}}
    for s in SCALES:
        names = [f"{s}_entity_{e}" for e in range(E)]
        generic = np.stack([_unit(anchors[(s, e)]) for e in range(E)])
        attrs = np.stack([_unit(class_means[(s, e, c)])
                          for e in range(E) for c in range(C)])
        slide = np.stack([_unit(np.mean([class_means[(s, e, c)] for e in range(E)],
                                        axis=0)) for c in range(C)])
        region = _unit(np.mean([anchors[(s, e)] for e in range(E)], axis=0))
        write_matrix(emb_dir / f"{s}_generic.mapf", generic)
        write_matrix(emb_dir / f"{s}_attributes.mapf", attrs)
        write_matrix(emb_dir / f"{s}_slide.mapf", slide)
        write_matrix(emb_dir / f"{s}_region.mapf", region.reshape(1, -1))
        index["scales"][s] = {
            "entities": names,
            "generic": f"{s}_generic.mapf",
            "attributes": f"{s}_attributes.mapf",
            "slide": f"{s}_slide.mapf",
            "region": f"{s}_region.mapf",
        }
    with open(emb_dir / "index.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")

    slides = []
    for c in range(C):
        for b in range(spec.bags_per_class):
            sid = f"slide_c{c}_{b:03d}"
            paths = {}
            for s in SCALES:
                n = spec.instances_per_bag
                n_tumor = int(round(spec.tumor_fraction * n))
                rows = np.empty((n, d))
                ents = rng.integers(0, E, size=n_tumor)
                for j in range(n_tumor):
                    mean = class_means[(s, int(ents[j]), c)]
                    rows[j] = mean + spec.noise_sigma * rng.standard_normal(d)
                for j in range(n_tumor, n):
                    rows[j] = (0.3 * background[s]
                               + spec.noise_sigma * rng.standard_normal(d))
                perm = rng.permutation(n)
                rows = rows[perm]
                rel = f"bags/{sid}_{s}.mapf"
                write_matrix(out / rel, rows)
                paths[s] = rel
            slides.append(SlideEntry(sid, c, paths["low"], paths["high"]))

    manifest = DatasetManifest(classes=index["subtypes"], dim=d, slides=slides,
                               root=out)
    manifest_path = out / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
