"""Declarative experiment configuration (YAML or JSON).

Every section rejects unknown keys. ``dump_config`` writes the canonical
form; parsing it again yields an equal object.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NeuronInput(_Strict):
    """``u(t) = amplitude * sin(2 pi t / period + chirp * t^2) + offset``."""

    kind: Literal["chirp", "constant", "none"] = "chirp"
    amplitude: float = 6.0
    period: float = 200.0
    chirp: float = 0.0003
    offset: float = 0.0


class NeuronSim(_Strict):
    dt: float = Field(0.025, gt=0)
    substeps: int = Field(2, ge=1)
    params: dict[str, float] = Field(default_factory=dict)
    initial_state: dict[str, float] = Field(default_factory=dict)
    input: NeuronInput = NeuronInput()


class HopfSim(_Strict):
    dt: float = Field(0.04, gt=0)
    substeps: int = Field(1, ge=1)
    mu: float = 1.0
    rho: float = -0.1
    sigma: float = 0.3
    D: float = Field(0.01, ge=0)
    x0: tuple[float, float] = (1.0, 0.0)


class ExternalData(_Strict):
    path: str
    n_modes: int | None = Field(None, ge=1)
    nan_policy: Literal["reject", "allow"] = "reject"


class Split(_Strict):
    """Durations in the time unit of the system."""

    burn_in: float = Field(50.0, ge=0)
    train: float = Field(300.0, gt=0)
    predict: float = Field(100.0, gt=0)
    warmup: int | None = Field(None, ge=2)


class LiftConfig(_Strict):
    kind: Literal["none", "polynomial", "rbf_then_polynomial"] = "rbf_then_polynomial"
    max_degree: int = Field(4, ge=1)
    include_linear: bool = False
    use_history: bool = True
    rbf_count: int = Field(10, ge=1)
    rbf_ranges: list[tuple[float, float]] = [(-300.0, 200.0), (0.0, 1.0)]
    rbf_seed: int = 0
    max_dim: int = Field(20000, ge=1)


class ModelConfig(_Strict):
    z: int = Field(10, ge=1)
    mode: Literal["linear_full", "nonlinear_full", "nonlinear_pod"] = "nonlinear_pod"
    zeta: int | None = Field(40, ge=1)
    rcond: float = Field(1e-10, gt=0)
    standardize: bool = True
    lift: LiftConfig = LiftConfig()


class PriorConfig(_Strict):
    kind: Literal["gaussian", "bernoulli_gaussian"] = "bernoulli_gaussian"
    mean: float = 0.0
    variance: float | None = Field(None, gt=0)
    sparsity_rho: float = Field(0.05, gt=0, le=1)


class VampConfig(_Strict):
    max_iters: int = Field(50, ge=1)
    damping: float = Field(0.9, gt=0, le=1)
    tol: float = Field(1e-8, ge=0)
    gamma_floor: float = Field(1e-11, gt=0)
    gamma_ceiling: float = Field(1e11, gt=0)
    path: Literal["svd", "direct"] = "svd"


class UqSection(_Strict):
    T_batch: int = Field(20, ge=1)
    thresholds: list[float] = [0.1, 0.3, 0.5, 0.7, 0.9]
    batch_sizes: list[int] = [5, 10, 20, 50, 100]
    prior: PriorConfig = PriorConfig()
    noise_precision: float | None = Field(None, gt=0)
    vamp: VampConfig = VampConfig()
    stride: int | None = Field(None, ge=1)
    projected: bool = False
    joint: bool = False

    @field_validator("thresholds")
    @classmethod
    def _thresholds(cls, v):
        if not v:
            raise ValueError("at least one threshold is required")
        if any(not 0 < t < 1 for t in v):
            raise ValueError("thresholds must lie in (0, 1)")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("thresholds must be strictly increasing")
        return v

    @field_validator("batch_sizes")
    @classmethod
    def _sizes(cls, v):
        if not v or any(b < 1 for b in v):
            raise ValueError("batch sizes must be positive integers")
        return v


class FtleConfig(_Strict):
    window: float | None = Field(None, gt=0)
    output_selector: list[int] = [0, 1]


class PipelineConfig(_Strict):
    system: Literal["neuron", "hopf", "external"] = "neuron"
    seed: int = 0
    output_dir: str = "out"
    neuron: NeuronSim = NeuronSim()
    hopf: HopfSim = HopfSim()
    external: ExternalData | None = None
    split: Split = Split()
    model: ModelConfig = ModelConfig()
    uq: UqSection = UqSection()
    ftle: FtleConfig = FtleConfig()

    @model_validator(mode="after")
    def _check(self):
        if self.system == "external" and self.external is None:
            raise ValueError("system 'external' needs an 'external' section")
        if self.model.mode == "nonlinear_pod" and self.model.zeta is None:
            raise ValueError("nonlinear_pod mode needs model.zeta")
        if self.uq.projected and self.model.mode != "nonlinear_pod":
            raise ValueError("uq.projected needs model.mode nonlinear_pod")
        return self

    @property
    def dt(self):
        if self.system == "neuron":
            return self.neuron.dt
        if self.system == "hopf":
            return self.hopf.dt
        return None


def parse_config(data: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from None


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


def config_dict(cfg: PipelineConfig) -> dict:
    return cfg.model_dump(mode="json")


def dump_config(cfg: PipelineConfig, fmt="yaml") -> str:
    """Canonical text form (every field spelled out, declaration order)."""
    d = config_dict(cfg)
    if fmt == "json":
        return json.dumps(d, indent=2) + "\n"
    return yaml.safe_dump(d, sort_keys=False, default_flow_style=None)


def _coerce(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(cfg: PipelineConfig, overrides) -> PipelineConfig:
    """Apply ``a.b.c=value`` overrides (values parsed as YAML scalars)."""
    d = config_dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                if p in node and node[p] is None:
                    node[p] = {}
                else:
                    raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = node[p]
        node[parts[-1]] = _coerce(raw)
    return parse_config(d)
