"""Strict, versioned experiment configuration (JSON).

Unknown keys anywhere in the file are rejected. Minimal example::

    {"version": 1,
     "dataset": {"kind": "toy"},
     "backbone": {"kind": "dsvdd_rbf"},
     "trainer": {"strategy": "loe_hard", "alpha": 0.1, "epochs": 200, "batch_size": 25,
                 "lr": 0.01},
     "eval": {"seeds": [0, 1, 2, 3, 4]},
     "output": {"directory": "runs/toy"}}
"""

from __future__ import annotations

import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError
from .trainer import STRATEGIES, TrainerConfig

CONFIG_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    kind: Literal["toy", "synthetic-tabular", "csv"] = "toy"
    alpha0: float = Field(0.1, ge=0.0, lt=1.0)
    # toy / synthetic-tabular: training draw size and a separate held-out draw
    n_normal: Optional[int] = Field(None, gt=0)
    test_normal: Optional[int] = Field(None, gt=0)
    test_anomaly: Optional[int] = Field(None, gt=0)
    # synthetic-tabular geometry
    dim: int = Field(20, gt=1)
    offset: float = 2.0
    shift: float = 2.0
    normal_var: float = Field(1.0, gt=0)
    anomaly_var: float = Field(1.0, gt=0)
    # csv
    path: Optional[str] = None
    label_column: Optional[str] = None
    contaminate: bool = False
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "csv" and not self.path:
            raise ValueError("csv dataset needs 'path'")
        if self.contaminate and self.label_column is None:
            raise ValueError("contamination needs 'label_column' to find the anomaly pool")
        return self


_BACKBONE_KEYS = {
    "dsvdd_rbf": {"rbf_centers", "recip_eps", "init_scale"},
    "ntl": {"n_transforms", "trans_hidden", "enc_hidden", "embed_dim", "tau", "residual"},
    "icl": {"window", "hidden", "embed_dim", "tau"},
}


class BackboneSection(_Strict):
    kind: Literal["dsvdd_rbf", "ntl", "icl"] = "dsvdd_rbf"
    rbf_centers: Optional[list[list[float]]] = None
    recip_eps: Optional[float] = Field(None, gt=0)
    init_scale: Optional[float] = Field(None, gt=0)
    n_transforms: Optional[int] = Field(None, ge=2)
    trans_hidden: Optional[int] = Field(None, gt=0)
    enc_hidden: Optional[list[int]] = None
    embed_dim: Optional[int] = Field(None, gt=0)
    tau: Optional[float] = Field(None, gt=0)
    residual: Optional[bool] = None
    window: Optional[int] = Field(None, gt=0)
    hidden: Optional[int] = Field(None, gt=0)

    @model_validator(mode="after")
    def _check(self):
        given = {k for k in self.model_fields_set if k != "kind" and getattr(self, k) is not None}
        stray = given - _BACKBONE_KEYS[self.kind]
        if stray:
            raise ValueError(f"keys {sorted(stray)} do not apply to backbone {self.kind!r}")
        return self

    def hyperparameters(self) -> dict:
        return {k: getattr(self, k) for k in _BACKBONE_KEYS[self.kind]
                if getattr(self, k) is not None}


class TrainerSection(_Strict):
    strategy: Literal[STRATEGIES] = "loe_hard"  # type: ignore[valid-type]
    alpha: float = Field(0.1, ge=0.0, lt=1.0)
    epochs: int = Field(200, gt=0)
    warmup_epochs: int = Field(2, ge=0)
    batch_size: int = Field(25, gt=0)
    lr: float = Field(0.01, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)

    def to_trainer_config(self, seed: int) -> TrainerConfig:
        return TrainerConfig(seed=seed, **self.model_dump())


class EvalSection(_Strict):
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    metrics: list[Literal["auc", "f1"]] = Field(default_factory=lambda: ["auc", "f1"])


class OutputSection(_Strict):
    directory: str = "runs/experiment"
    record_time: bool = False


class GridSection(_Strict):
    alphas: list[float] = Field(default_factory=lambda: [0.05, 0.1, 0.15])
    alpha0s: list[float] = Field(default_factory=lambda: [0.1])
    workers: int = Field(1, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if not self.alphas or not self.alpha0s:
            raise ValueError("grid axes must be non-empty")
        if any(not 0 <= a < 1 for a in self.alphas + self.alpha0s):
            raise ValueError("grid ratios must lie in [0, 1)")
        return self


class ExperimentConfig(_Strict):
    version: Literal[1] = CONFIG_VERSION
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    backbone: BackboneSection = Field(default_factory=BackboneSection)
    trainer: TrainerSection = Field(default_factory=TrainerSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    output: OutputSection = Field(default_factory=OutputSection)
    grid: Optional[GridSection] = None

    @model_validator(mode="after")
    def _check(self):
        if self.trainer.warmup_epochs >= self.trainer.epochs:
            raise ValueError("trainer.warmup_epochs must be smaller than trainer.epochs")
        return self

    def echo(self) -> str:
        """Canonical JSON for the config echo written next to every output."""
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid config:\n{exc}") from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    """Apply dotted-key overrides (``trainer.alpha=0``) and re-validate."""
    data = cfg.model_dump(mode="json")
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                if node.get(p) is None and p == "grid":
                    node[p] = {}
                else:
                    raise ConfigurationError(f"unknown config key {key!r}")
            node = node[p]
        node[parts[-1]] = value
    return parse_config(data)
