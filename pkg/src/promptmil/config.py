"""Run and experiment configuration.

Experiment files are flat ``key = value`` text with ``#`` comments; unknown
keys are rejected and every invariant is enforced at parse time. All
randomness flows from the single ``seed`` through named substreams so the
split, the parameter init, and the synthetic generator can each be
reproduced in isolation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .dataio import SCALES


class ConfigError(ValueError):
    pass


SWEEPABLE_KEYS = ("lambda", "n_neighbors", "n_entities", "r", "shots")


@dataclass
class RunConfig:
    shots: int = 16
    fusion_lambda: float = 0.3
    selection_ratio: float = 0.7
    n_entities: int = 8
    n_neighbors: int = 7
    scales: tuple[str, ...] = ("low", "high")
    no_selection: bool = False
    no_egca: bool = False
    no_graph: bool = False
    entity_only: bool = False
    slide_only: bool = False
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    max_epochs: int = 80
    patience: int = 10
    seed: int = 0
    repeats: int = 5
    context_length: int = 16
    separate_context: bool = False
    norm_after_residual: bool = False
    per_branch_temperature: bool = False
    allow_short_class: bool = False
    encoder_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fusion_lambda <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.fusion_lambda}")
        if not 0.0 < self.selection_ratio <= 1.0:
            raise ConfigError(f"r must lie in (0, 1], got {self.selection_ratio}")
        if not self.scales or any(s not in SCALES for s in self.scales):
            raise ConfigError(f"scales must be a non-empty subset of {SCALES}")
        if self.entity_only and self.slide_only:
            raise ConfigError("entity_only and slide_only are mutually exclusive")
        if self.shots < 1:
            raise ConfigError("shots must be >= 1")
        if self.n_entities < 1 or self.n_neighbors < 1:
            raise ConfigError("n_entities and n_neighbors must be >= 1")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("max_epochs must be >= 1 and patience >= 0")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.context_length < 1:
            raise ConfigError("context_length must be >= 1")

    @property
    def effective_lambda(self) -> float:
        if self.entity_only:
            return 0.0
        if self.slide_only:
            return 1.0
        return self.fusion_lambda

    @property
    def effective_ratio(self) -> float:
        return 1.0 if self.no_selection else self.selection_ratio

    @property
    def enabled_scales(self) -> tuple[str, ...]:
        return tuple(s for s in SCALES if s in self.scales)


@dataclass
class ExperimentConfig:
    manifest: str = ""
    prompt_pack: str = ""
    embedding_bundle: str = ""
    out_dir: str = "out"
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> None:
        if not self.manifest:
            raise ConfigError("config must set 'manifest'")
        if bool(self.prompt_pack) == bool(self.embedding_bundle):
            raise ConfigError(
                "config must set exactly one of 'prompt_pack' or 'embedding_bundle'")


_RUN_KEY_ALIASES = {
    "lambda": "fusion_lambda",
    "r": "selection_ratio",
}
_TOP_KEYS = {"manifest", "prompt_pack", "embedding_bundle", "out_dir"}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")


def _coerce(key: str, raw: str, target_type) -> object:
    try:
        if target_type is bool:
            return _parse_bool(raw, key)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is str:
            return raw
    except ValueError as err:
        raise ConfigError(f"key {key!r}: {err}") from err
    raise ConfigError(f"key {key!r} has unsupported type")


def parse_experiment_config(path: str | Path,
                            overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse a flat key-value config file; overrides win over file values."""
    entries: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        entries[key.strip()] = value.strip()
    if overrides:
        entries.update(overrides)
    return build_experiment_config(entries)


def build_experiment_config(entries: dict[str, str]) -> ExperimentConfig:
    run_fields = {f.name: f for f in fields(RunConfig)}
    cfg = ExperimentConfig()
    run_kwargs: dict[str, object] = {}
    for key, raw in entries.items():
        name = _RUN_KEY_ALIASES.get(key, key)
        if key in _TOP_KEYS:
            setattr(cfg, key, raw)
        elif name == "scales":
            parts = tuple(p.strip() for p in raw.split(",") if p.strip())
            run_kwargs["scales"] = parts
        elif name in run_fields:
            f = run_fields[name]
            target = {"shots": int, "fusion_lambda": float, "selection_ratio": float,
                      "n_entities": int, "n_neighbors": int, "lr": float,
                      "adam_eps": float, "weight_decay": float, "max_epochs": int,
                      "patience": int, "seed": int, "repeats": int,
                      "context_length": int, "encoder_seed": int}.get(f.name, bool)
            run_kwargs[name] = _coerce(key, raw, target)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg.run = RunConfig(**run_kwargs)
    cfg.validate()
    return cfg


def config_with(run: RunConfig, **changes) -> RunConfig:
    """Copy of a run config with the given fields replaced (revalidated)."""
    current = {f.name: getattr(run, f.name) for f in fields(RunConfig)}
    current.update(changes)
    return RunConfig(**current)
