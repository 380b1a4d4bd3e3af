"""Experiment configuration: dataclasses plus lossless TOML/JSON round-trips."""
from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .losses import KINDS as LOSS_KINDS
from .models import COORD_MLP, EQUIVARIANT, GRAPH_HEAD, KINDS as MODEL_KINDS
from .tasks import SyntheticTask
from .training import TrainConfig

DEFAULT_HIDDEN = {COORD_MLP: (48, 48), GRAPH_HEAD: (16, 8), EQUIVARIANT: (16,)}
DEFAULT_SUBSET = {COORD_MLP: "out", GRAPH_HEAD: "head.weight", EQUIVARIANT: "radial_out"}
DEFAULT_THEOREM_GROUP = {COORD_MLP: "C4z", GRAPH_HEAD: "octahedral", EQUIVARIANT: "C4z"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    kind: str = COORD_MLP
    hidden: tuple = ()  # empty -> per-kind default

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose from {MODEL_KINDS}")
        hidden = tuple(int(h) for h in self.hidden) or DEFAULT_HIDDEN[self.kind]
        if any(h < 1 for h in hidden):
            raise ConfigError("hidden widths must be positive")
        if self.kind == COORD_MLP and any(h % 3 for h in hidden):
            raise ConfigError("coord-mlp hidden widths must be multiples of 3")
        object.__setattr__(self, "hidden", hidden)


@dataclass(frozen=True)
class AnalysisConfig:
    subset: str = ""  # empty -> per-kind default
    hessian_batches: int = 1
    hessian_rotations: int = 10
    checkpoint_step: int = 500
    grid_radius: int = 10
    step_scale: float = 2.5
    theorem_group: str = ""  # empty -> per-kind default
    theorem_samples: int = 32
    sensitivity_max_n: int = 64
    sensitivity_repeats: int = 100

    def __post_init__(self):
        if self.hessian_batches < 1 or self.hessian_rotations < 1:
            raise ConfigError("hessian_batches and hessian_rotations must be >= 1")
        if self.grid_radius < 1 or self.step_scale <= 0:
            raise ConfigError("grid_radius must be >= 1 and step_scale > 0")
        if self.sensitivity_max_n < 2 or self.sensitivity_repeats < 1:
            raise ConfigError("sensitivity_max_n must be >= 2 and sensitivity_repeats >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    task: SyntheticTask = field(default_factory=SyntheticTask)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    group: str = "SO3"
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.train.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.train.loss!r}; choose from {LOSS_KINDS}")
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))

    @property
    def subset(self) -> str:
        return self.analysis.subset or DEFAULT_SUBSET[self.model.kind]

    @property
    def theorem_group(self) -> str:
        return self.analysis.theorem_group or DEFAULT_THEOREM_GROUP[self.model.kind]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed), train=replace(self.train, seed=int(seed)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["hidden"] = list(self.model.hidden)
        return d


_SECTIONS = {"task": SyntheticTask, "model": ModelConfig, "train": TrainConfig, "analysis": AnalysisConfig}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    for name, cls in _SECTIONS.items():
        if name in data:
            data[name] = _build(cls, data[name], name)
    try:
        return ExperimentConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        if path.suffix == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return from_dict(data)


def dumps(config: ExperimentConfig, fmt: str = "toml") -> str:
    d = config.to_dict()
    if fmt == "json":
        return json.dumps(d, indent=2, sort_keys=True) + "\n"
    return tomli_w.dumps(d)


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps(config, "json" if path.suffix == ".json" else "toml"))
    return path
