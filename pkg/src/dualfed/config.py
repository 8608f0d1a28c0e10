"""Versioned experiment configuration (YAML or JSON) with dotted overrides."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

# (BKD, MHSA, A_di, A_dw)
ABLATION_ROWS = [
    (True, True, True, True),
    (False, True, True, True),
    (True, False, True, True),
    (True, False, True, False),
    (False, False, True, False),
    (False, False, False, False),
]
# hard-domain table; its fifth row lists MHSA on with A_dw off, which cannot run
HARD_DOMAIN_ROWS = [
    (True, True, True, True),
    (False, True, True, True),
    (True, False, True, True),
    (True, True, False, True),
    (True, True, True, False),
    (False, False, False, False),
]
ALLOWED_TOGGLES = set(ABLATION_ROWS) | {(True, True, False, True)}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Section):
    generator: Literal["blobs", "moons"] = "blobs"
    n_domains: int = Field(4, ge=2)
    n_classes: int = Field(5, ge=2)
    n_per_class: int = Field(200, ge=2)
    d_in: int = Field(16, ge=2)
    shift_strength: float = Field(0.5, ge=0)
    noise: float = Field(1.0, ge=0)
    seed: int | None = None
    csv: str | None = None


class ModelConfig(_Section):
    d_h: int = Field(64, ge=2)
    d_layers: int = Field(2, ge=1)
    rank: int = Field(8, ge=1)
    heads: int = Field(4, ge=1)
    kia_layers: Union[Literal["last", "all"], list[int]] = "last"
    nonlinearity: Literal["gelu", "relu", "identity"] = "gelu"
    warm_start_epochs: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.rank >= self.d_h:
            raise ValueError("rank must be smaller than d_h")
        if self.d_h % self.heads:
            raise ValueError("d_h must be divisible by heads")
        return self

    def layer_indices(self) -> tuple[int, ...]:
        if self.kia_layers == "last":
            return (self.d_layers - 1,)
        if self.kia_layers == "all":
            return tuple(range(self.d_layers))
        return tuple(sorted(set(self.kia_layers)))


class ToggleConfig(_Section):
    bkd: bool = True
    mhsa: bool = True
    a_di: bool = True
    a_dw: bool = True

    def as_tuple(self) -> tuple[bool, bool, bool, bool]:
        return (self.bkd, self.mhsa, self.a_di, self.a_dw)

    @model_validator(mode="after")
    def _check(self):
        if self.mhsa and not self.a_dw:
            raise ValueError("MHSA lives inside the domain-aware branch; set mhsa=false when a_dw=false")
        if self.as_tuple() not in ALLOWED_TOGGLES:
            raise ValueError(f"toggle combination {self.model_dump()} is not an ablation row")
        return self


class LossSection(_Section):
    alpha_mode: Literal["fixed", "dynamic"] = "fixed"
    alpha: float = Field(1.0, ge=0)
    alpha_max: float = Field(2.0, ge=0)
    tau: float = Field(100.0, gt=0)
    temperature: float = Field(1.0, gt=0)
    ce_target: Literal["both-branches", "fused-only"] = "both-branches"


class OptimConfig(_Section):
    lr: float = Field(0.05, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    schedule: Literal["step", "constant"] = "step"
    step_fraction: float = Field(0.2, gt=0)
    gamma: float = Field(0.1, gt=0)


class FusionConfig(_Section):
    variant: Literal["weighted-sum", "concat-project"] = "weighted-sum"
    lam: float = Field(1.0, ge=0)


class TrainConfig(_Section):
    version: Literal[1] = 1
    rounds: int = Field(30, ge=0)
    local_epochs: int = Field(3, ge=0)
    batch_size: int = Field(32, ge=1)
    clients: int | None = Field(None, ge=1)
    partition: Literal["domain", "pooled"] = "domain"
    participation: float = Field(1.0, gt=0, le=1)
    target: Union[int, Literal["all"]] = "all"
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    eval_mode: Literal["client-mean", "ensemble"] = "client-mean"
    client_workers: int = Field(1, ge=1)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    toggles: ToggleConfig = Field(default_factory=ToggleConfig)
    loss: LossSection = Field(default_factory=LossSection)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)

    @model_validator(mode="after")
    def _check(self):
        if isinstance(self.target, int) and not 0 <= self.target < self.dataset.n_domains:
            raise ValueError(f"target {self.target} out of range for {self.dataset.n_domains} domains")
        if any(ly >= self.model.d_layers or ly < 0 for ly in self.model.layer_indices()):
            raise ValueError("kia_layers out of range")
        return self

    def targets(self) -> list[int]:
        if self.target == "all":
            return list(range(self.dataset.n_domains))
        return [self.target]

    def n_clients(self) -> int:
        return self.clients if self.clients is not None else self.dataset.n_domains - 1

    def updated(self, **changes) -> TrainConfig:
        """Copy with dotted-key changes, re-validated."""
        data = self.model_dump()
        for key, value in changes.items():
            _set_dotted(data, key.replace("__", "."), value)
        return validate_config(data)


def _set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def _field_path(err: ValidationError) -> str:
    first = err.errors()[0]
    return ".".join(str(p) for p in first["loc"]) or "<root>"


def validate_config(data: dict) -> TrainConfig:
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(f"invalid config at {_field_path(exc)}: {first['msg']}",
                          field=_field_path(exc)) from None


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE", field=item)
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=()) -> TrainConfig:
    """Read a YAML/JSON config file (or defaults) and apply KEY=VALUE overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found", field="--config")
        text = p.read_text()
        try:
            data = json.loads(text) if p.suffix == ".json" else (yaml.safe_load(text) or {})
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {p}: {exc}", field="--config") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping", field="<root>")
    for item in overrides:
        key, value = parse_override(item)
        _set_dotted(data, key, value)
    return validate_config(data)
