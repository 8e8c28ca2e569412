"""JSON experiment configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..errors import ConfigError
from ..unlearn.losses import UnlearnConfig


@dataclass
class CorpusConfig:
    n_entities: int = 20
    qa_per_entity: int = 5
    n_world: int = 20
    target_fraction: float = 0.1
    never_seen_fraction: float = 0.1


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    max_seq_len: int = 64
    ff_mult: int = 4


@dataclass
class BaseTraining:
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 16


@dataclass
class EvalConfig:
    max_new: int = 40
    pca: bool = True
    csd: bool = True
    mix: bool = True
    gates: bool = True
    attacks: bool = True
    # vanilla baseline with the same forgetting method, for utility comparison
    baseline: bool = True
    embedding_layer: int | None = None  # None: last layer


@dataclass
class SequentialConfig:
    n_requests: int = 3
    request_fraction: float = 0.05


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelSection = field(default_factory=ModelSection)
    base: BaseTraining = field(default_factory=BaseTraining)
    # toy-scale tuning: one step sees every target example, 1500 steps in all
    unlearn: UnlearnConfig = field(
        default_factory=lambda: UnlearnConfig(lr=1e-2, epochs=1500, batch_size=10))
    baseline_unlearn: UnlearnConfig = field(
        default_factory=lambda: UnlearnConfig(mode="vanilla", lr=3e-4, epochs=300, batch_size=10))
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    sequential: SequentialConfig = field(default_factory=SequentialConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self, with_out_dir: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not with_out_dir:
            del d["out_dir"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        blob = json.dumps(self.to_dict(with_out_dir=False), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def with_seed(self, seed: int) -> ExperimentConfig:
        return dataclasses.replace(self, seed=seed)


_SECTIONS = ("corpus", "model", "base", "unlearn", "baseline_unlearn", "evaluation", "sequential")


def _build(default, values: Any, where: str):
    """Override fields of the section ``default`` with ``values``."""
    cls = type(default)
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object, got {type(values).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return dataclasses.replace(default, **values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"out_dir", "seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    defaults = ExperimentConfig()
    kwargs: dict[str, Any] = {}
    for name in _SECTIONS:
        if name in raw:
            kwargs[name] = _build(getattr(defaults, name), raw[name], name)
    if "out_dir" in raw:
        kwargs["out_dir"] = str(raw["out_dir"])
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = raw["seed"]
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    for name in ("n_entities", "qa_per_entity", "n_world"):
        if getattr(cfg.corpus, name) < 1:
            raise ConfigError(f"corpus.{name} must be positive")
    m = cfg.model
    for name in ("d_model", "n_layers", "n_heads", "max_seq_len", "ff_mult"):
        if not isinstance(getattr(m, name), int) or getattr(m, name) < 1:
            raise ConfigError(f"model.{name} must be a positive integer")
    if m.d_model % m.n_heads:
        raise ConfigError(f"model.d_model={m.d_model} is not divisible by model.n_heads={m.n_heads}")
    if not 0 < cfg.corpus.target_fraction < 1 or not 0 <= cfg.corpus.never_seen_fraction < 1:
        raise ConfigError("corpus fractions must lie in [0, 1) with a positive target fraction")
    if cfg.base.epochs < 1 or cfg.base.batch_size < 1 or not cfg.base.lr > 0:
        raise ConfigError("base training needs epochs >= 1, batch_size >= 1, lr > 0")
    if cfg.baseline_unlearn.mode != "vanilla":
        raise ConfigError("baseline_unlearn.mode must be 'vanilla'")
    if cfg.sequential.n_requests < 1:
        raise ConfigError("sequential.n_requests must be at least 1")
    if not 0 < cfg.sequential.request_fraction < 1:
        raise ConfigError("sequential.request_fraction must lie in (0, 1)")
    if cfg.evaluation.max_new < 1:
        raise ConfigError("evaluation.max_new must be at least 1")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        validate(cfg)
        return cfg
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)
