"""Experiment configuration: one YAML file fully determines a run."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .backbone import ModelConfig
from .map_head import MapConfig
from .sap import PruneConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "STAMP_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"  # "synthetic" or "csv"
    n_users: int = 1000
    n_items: int = 2000
    d_emb: int = 32
    n_latent_clusters: int = 4
    history_len: tuple[int, int] = (5, 20)
    seed: int = 0
    csv_path: str | None = None
    embeddings_path: str | None = None  # csv rows: item_id, v_1, ..., v_d
    min_count: int = 5
    window_items: int = 40

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'csv', got {self.kind!r}")
        object.__setattr__(self, "history_len", tuple(int(v) for v in self.history_len))
        lo, hi = self.history_len
        if not 3 <= lo <= hi:
            raise ConfigError(f"data.history_len must satisfy 3 <= lo <= hi, got {self.history_len}")
        if self.window_items < 1:
            raise ConfigError("data.window_items must be >= 1")
        if self.kind == "csv" and not (self.csv_path and self.embeddings_path):
            raise ConfigError("csv data needs both csv_path and embeddings_path")


@dataclass(frozen=True)
class QuantizerConfig:
    L: int = 3
    V_c: int = 256
    max_iters: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.L < 1 or self.V_c < 1:
            raise ConfigError("quantizer.L and quantizer.V_c must be >= 1")


@dataclass(frozen=True)
class ModelSection:
    """ModelConfig minus the fields derived from the data (vocab, positions)."""

    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 8
    d_ff: int = 1024
    dropout_rate: float = 0.15
    init_seed: int = 0

    def build(self, L: int, V_c: int, window_items: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=2 + L * V_c,
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            dropout_rate=self.dropout_rate,
            max_positions=1 + window_items * L + L - 1,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    model: ModelSection = field(default_factory=ModelSection)
    prune: PruneConfig = field(default_factory=lambda: PruneConfig(strategy="none"))
    map: MapConfig = field(default_factory=lambda: MapConfig(enabled=False))
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "out"

    def __post_init__(self) -> None:
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc
        if self.prune.strategy != "none":
            self.prune.validate_for(self.quantizer.L)
            if self.prune.l_prune >= self.model.n_layers:
                raise ConfigError(f"prune.l_prune={self.prune.l_prune} must be below model.n_layers={self.model.n_layers}")

    def model_config(self) -> ModelConfig:
        return self.model.build(self.quantizer.L, self.quantizer.V_c, self.data.window_items)

    @property
    def variant(self) -> str:
        """Base / SAP / MAP / STAMP, from which modules are switched on."""
        pruned = self.prune.strategy != "none"
        if self.map.enabled:
            return "STAMP" if pruned else "MAP"
        return "SAP" if pruned else "Base"

    # -- paths ------------------------------------------------------------------

    def output_path(self) -> Path:
        p = Path(self.output_dir)
        if not p.is_absolute():
            p = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p
        return p

    def data_dir(self) -> Path:
        return self.output_path() / "data"

    def run_dir(self) -> Path:
        return self.output_path() / "runs" / self.name

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["data"]["history_len"] = list(self.data.history_len)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        d = dict(d or {})
        sections = {"data": DataConfig, "quantizer": QuantizerConfig, "model": ModelSection, "prune": PruneConfig, "map": MapConfig, "train": TrainConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for key, value in d.items():
            if key in sections:
                kw[key] = _section(sections[key], key, value)
            else:
                kw[key] = value
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_yaml(path.read_text())

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Reseed model init and every training stream; the data stays fixed."""
        return replace(self, model=replace(self.model, init_seed=seed), train=replace(self.train, seed=seed))

    def check_paths(self) -> None:
        if self.data.kind == "csv":
            for p in (self.data.csv_path, self.data.embeddings_path):
                if not Path(p).exists():
                    raise ConfigError(f"data file not found: {p}")


def _section(cls, key: str, value):
    if value is None:
        return cls()
    if not isinstance(value, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
    try:
        return cls(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc
