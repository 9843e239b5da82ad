"""Experiment configuration: dataclasses, YAML loading, provenance hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpusgen import make_domain_pair, sample_corpus
from .forensics import DEFAULT_FRACTIONS
from .nanoformer import ConfigError, ModelConfig
from .trainer import TrainOpts
from .validation import check_fractions, check_probability


@dataclass
class DomainConfig:
    seed: int = 0
    overlap: float = 0.7
    vocab_size: int = 200
    reorder_g: str = "identity"
    reorder_i: str = "reverse"
    rotate_k: int = 1
    min_len: int = 4
    max_len: int = 12
    n_train_g: int = 20000
    n_train_i: int = 5000
    n_dev: int = 200
    n_test: int = 200
    corpus_seed_g: int = 1
    corpus_seed_i: int = 2


@dataclass
class AnalysisConfig:
    t_limit: int = 2000
    fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    # empty: every SA/CA/FFN weight matrix
    matrices: list = field(default_factory=list)
    grouping: str = "position"
    attach_ln: bool = True


def _model_defaults() -> dict:
    d = dataclasses.asdict(ModelConfig(max_len=24))
    # vocabulary sizes come from the domain pair
    d.pop("src_vocab")
    d.pop("tgt_vocab")
    return d


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=_model_defaults)
    domains: DomainConfig = field(default_factory=DomainConfig)
    train: TrainOpts = field(default_factory=lambda: TrainOpts(epochs=4, lr=1e-3, batch_size=64, select_on="G"))
    continual: TrainOpts = field(default_factory=lambda: TrainOpts(epochs=20, lr=3e-4, batch_size=32, select_on="I"))
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output_dir: str = "runs"
    g_checkpoint: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def dump_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def validate(self) -> "ExperimentConfig":
        d = self.domains
        check_probability(d.overlap, "domains.overlap")
        for name in ("n_train_g", "n_train_i", "n_dev", "n_test", "vocab_size"):
            if getattr(d, name) < 1:
                raise ConfigError(f"domains.{name} must be >= 1")
        self.train.validate()
        self.continual.validate()
        check_fractions(self.analysis.fractions)
        if self.analysis.t_limit < 1:
            raise ConfigError("analysis.t_limit must be >= 1")
        if self.analysis.grouping not in ("position", "type"):
            raise ConfigError(f"analysis.grouping must be 'position' or 'type', got {self.analysis.grouping!r}")
        if d.max_len + 2 > self.model.get("max_len", 0):
            raise ConfigError(f"model.max_len must be >= domains.max_len + 2 = {d.max_len + 2}")
        self.model_config(3, 3)
        return self

    def model_config(self, src_vocab: int, tgt_vocab: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "src_vocab": src_vocab, "tgt_vocab": tgt_vocab}).validate()

    def build_data(self):
        """Domain specs and corpora for both domains."""
        d = self.domains
        g, i = make_domain_pair(
            d.seed, d.overlap, d.vocab_size, reorder_g=d.reorder_g, reorder_i=d.reorder_i,
            rotate_k=d.rotate_k, min_len=d.min_len, max_len=d.max_len,
        )
        cg = sample_corpus(g, d.n_train_g, d.corpus_seed_g, d.n_dev, d.n_test)
        ci = sample_corpus(i, d.n_train_i, d.corpus_seed_i, d.n_dev, d.n_test)
        return g, i, cg, ci


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    base = ExperimentConfig()
    model = {**base.model, **(raw.get("model") or {})}
    bad = set(model) - set(base.model)
    if bad:
        raise ConfigError(f"unknown keys in model: {sorted(bad)}")
    train_defaults = dataclasses.asdict(base.train)
    cont_defaults = dataclasses.asdict(base.continual)
    cfg = ExperimentConfig(
        model=model,
        domains=_build(DomainConfig, raw.get("domains"), "domains"),
        train=_build(TrainOpts, {**train_defaults, **(raw.get("train") or {})}, "train"),
        continual=_build(TrainOpts, {**cont_defaults, **(raw.get("continual") or {})}, "continual"),
        analysis=_build(AnalysisConfig, raw.get("analysis"), "analysis"),
        output_dir=str(raw.get("output_dir", base.output_dir)),
        g_checkpoint=raw.get("g_checkpoint"),
    )
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must contain a mapping")
    return config_from_dict(raw)
