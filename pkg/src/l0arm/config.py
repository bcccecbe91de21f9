"""Run configuration: a strict JSON document describing one experiment.

Unknown keys are rejected with the dotted path of the offending field, and
``RunConfig.from_json(cfg.to_json())`` reproduces ``cfg`` exactly.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

OUTPUT_ROOT_ENV = "L0ARM_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=False, validate_assignment=True)


class GateInitSpec(_Strict):
    mean: float
    var: float = 0.01

    @field_validator("mean")
    @classmethod
    def _mean(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("must lie in (0, 1)")
        return v

    @field_validator("var")
    @classmethod
    def _var(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v


class GateSpec(_Strict):
    family: Literal["hard_sigmoid", "scaled_sigmoid"] = "hard_sigmoid"
    k: float = 7.0
    # None: N(0.8, 0.01) before the first weighted layer, N(0.5, 0.01) elsewhere
    init: Optional[list[GateInitSpec]] = None

    @field_validator("k")
    @classmethod
    def _k(cls, v):
        if v <= 0:
            raise ValueError("must be > 0")
        return v


class SyntheticSpec(_Strict):
    name: Literal["xor", "blobs"] = "xor"
    n_train: int = Field(200, ge=4)
    n_test: int = Field(200, ge=4)
    noise: Optional[float] = None
    n_features: int = Field(2, ge=2)
    n_classes: int = Field(2, ge=2)


class DataSpec(_Strict):
    kind: Literal["mnist", "synthetic"] = "mnist"
    path: Optional[str] = None
    normalize: Literal["standardize", "unit"] = "standardize"
    train_subset: Optional[int] = Field(None, ge=1)
    test_subset: Optional[int] = Field(None, ge=1)
    synthetic: Optional[SyntheticSpec] = None

    @model_validator(mode="after")
    def _source(self):
        if self.kind == "mnist" and not self.path:
            raise ValueError("data.path is required when data.kind is 'mnist'")
        if self.kind == "synthetic" and self.synthetic is None:
            raise ValueError("data.synthetic is required when data.kind is 'synthetic'")
        return self


class ScheduleSpec(_Strict):
    kind: Literal["halve_every", "multistep", "constant"] = "halve_every"
    epochs: int = Field(100, ge=1)
    milestones: list[int] = Field(default_factory=list)
    factor: float = 0.1


class OptimizerSpec(_Strict):
    kind: Literal["adam", "nesterov"] = "adam"
    lr: float = Field(1e-3, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = Field(0.0, ge=0)
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)


class RunConfig(_Strict):
    name: str = "run"
    model: str = "mlp_784_300_100"
    data: DataSpec
    estimator: Literal["arm", "ar"] = "arm"
    gate: GateSpec = Field(default_factory=GateSpec)
    # multiplied by 1/N_train at run start; scalar or one value per gate layer
    lambda_scaled: Union[float, list[float]] = 0.1
    lambda_l1_scaled: float = Field(0.0, ge=0)
    lambda_l2_scaled: float = Field(0.0, ge=0)
    group_weighted: bool = True
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)
    grad_space: Literal["phi", "logit"] = "phi"
    loss: Literal["cross_entropy", "mse"] = "cross_entropy"
    epochs: int = Field(1, ge=0)
    batch_size: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)
    tau: float = Field(0.5, gt=0, lt=1)
    checkpoint_every: int = Field(0, ge=0)
    output_dir: Optional[str] = None

    @field_validator("lambda_scaled")
    @classmethod
    def _lam(cls, v):
        vals = v if isinstance(v, list) else [v]
        if not vals or any(x < 0 for x in vals):
            raise ValueError("must be >= 0 (scalar or non-empty list)")
        return v

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            return cls.model_validate(d)
        except ValidationError as e:
            raise ConfigError(_describe(e)) from None

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def resolve_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.name


def _describe(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = "unknown key" if e["type"] == "extra_forbidden" else e["msg"]
        lines.append(f"{loc}: {msg}")
    return "invalid config: " + "; ".join(lines)
