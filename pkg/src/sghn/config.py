"""Declarative experiment config (one JSON document) and its validation."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .autodiff import ACTIVATIONS
from .integrate import IntegratorConfig
from .lattice import Kind, LatticeSpec
from .models import MlpConfig
from .train import IcSampler, Schedule, SghnOptions, TrainConfig, table_rates

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "ValidationError"]


class ConfigError(ValueError):
    pass


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemBlock(_Block):
    kind: Kind = Kind.FK
    n: int = 32
    m: Optional[int] = None
    mu: float = 0.0
    a: float = 1.0
    b: float = 1.0
    rho: float = 1.0

    def spec(self) -> LatticeSpec:
        return LatticeSpec(self.kind, self.n, self.m, self.mu, self.a, self.b, self.rho)


class DataBlock(_Block):
    n_traj: int = Field(50, ge=1)
    t_end: float = Field(5.0, gt=0)
    h: float = Field(0.0025, gt=0)
    stride: int = Field(20, ge=1)
    sampler: Literal["Uniform01", "SineDisplacement"] = "Uniform01"
    target_mode: Literal["Oracle", "FiniteDiff"] = "Oracle"
    seed: int = Field(0, ge=0)


class ModelBlock(_Block):
    kind: Literal["sghn", "hnn", "mlp", "oracle"] = "sghn"
    depth: int = Field(1, ge=1)
    width: int = Field(32, ge=1)
    activation: str = "tanh"
    edge_input: Literal["diff", "pair"] = "diff"

    @field_validator("activation")
    @classmethod
    def _known_activation(cls, v: str) -> str:
        if v not in ACTIVATIONS:
            raise ValueError(f"unknown activation {v!r}; allowed: {', '.join(sorted(ACTIVATIONS))}")
        return v

    def net(self) -> MlpConfig:
        return MlpConfig(self.depth, self.width, self.activation)


class TrainBlock(_Block):
    epochs: int = Field(10000, ge=1)
    batch_size: int = Field(256, ge=1)
    rates: Optional[tuple[float, ...]] = None
    boundaries: tuple[int, ...] = (3500, 5000)
    seed: int = Field(0, ge=0)
    l1: float = Field(1e-4, ge=0)
    tau: float = Field(0.1, ge=0, le=1)
    phase1_fraction: float = Field(0.6, gt=0, le=1)


class EvalBlock(_Block):
    t_end_test: float = Field(15.0, gt=0)
    n_test: int = Field(20, ge=1)
    seed: int = Field(1, ge=0)
    metrics: tuple[str, ...] = ("trajectory_mse", "conserved_mse", "mape")
    tau: float = Field(0.1, ge=0, le=1)


class SweepBlock(_Block):
    mu_grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    models: tuple[Literal["sghn", "hnn", "mlp"], ...] = ("sghn", "hnn", "mlp")
    workers: int = Field(1, ge=1)

    @field_validator("mu_grid")
    @classmethod
    def _in_unit(cls, v):
        if not v or any(not 0 <= x <= 1 for x in v):
            raise ValueError("mu_grid must be a non-empty list of values in [0, 1]")
        return v


class ExperimentConfig(_Block):
    system: SystemBlock = SystemBlock()
    data: DataBlock = DataBlock()
    model: ModelBlock = ModelBlock()
    train: TrainBlock = TrainBlock()
    eval: EvalBlock = EvalBlock()
    sweep: SweepBlock = SweepBlock()
    out: str = "runs/default"

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        try:
            self.system.spec()
            IntegratorConfig(self.data.h)
            self.schedule()
        except ValueError as exc:
            raise ValueError(str(exc)) from None
        return self

    # derived objects -----------------------------------------------------

    def spec(self) -> LatticeSpec:
        return self.system.spec()

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.data.h, "Srkn5")

    def sampler(self, stream: int = 0) -> IcSampler:
        return IcSampler(self.data.sampler, self.data.seed, stream)

    def schedule(self) -> Schedule:
        rates = self.train.rates or table_rates(self.model.kind, self.model.activation, self.system.kind.value)
        base = Schedule(tuple(rates), tuple(self.train.boundaries), 10000)
        return base.scaled(self.train.epochs)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.train.epochs, batch_size=self.train.batch_size,
                           schedule=self.schedule(), seed=self.train.seed,
                           sghn=SghnOptions(self.train.l1, self.train.tau, self.train.phase1_fraction))

    def with_overrides(self, seed: int | None = None, budget: int | None = None,
                       out: str | None = None) -> "ExperimentConfig":
        """``seed`` replaces every seed in the document; ``budget`` sets the epoch count."""
        doc = self.model_dump(mode="json")
        if seed is not None:
            doc["data"]["seed"] = seed
            doc["train"]["seed"] = seed
            doc["eval"]["seed"] = seed + 1
        if budget is not None:
            doc["train"]["epochs"] = budget
        if out is not None:
            doc["out"] = out
        try:
            return ExperimentConfig.model_validate(doc)
        except ValidationError as exc:
            raise ConfigError(f"invalid override:\n{exc}") from None


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse and validate; problems come back as :class:`ConfigError`."""
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from None
