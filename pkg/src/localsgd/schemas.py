"""Experiment configuration documents.

A config is one JSON object with ``problem``, ``method`` and ``run`` blocks
and optional ``theory`` and ``sweep`` blocks.  Unknown keys are rejected.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import methods

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "dump_config", "ValidationError"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class QuadraticBlock(_Strict):
    n: int = Field(ge=1)
    m: int = Field(ge=1)
    d: int = Field(ge=1)
    mu: float = Field(default=1e-3, ge=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _fits(self):
        if self.m > self.d:
            raise ValueError(f"m={self.m} orthonormal vectors do not fit in d={self.d}")
        return self


class ProblemBlock(_Strict):
    kind: Literal["quadratic", "logistic"]
    quadratic: QuadraticBlock | None = None
    instance: int | None = Field(default=None, description="quadratic instance type 0-3")
    dataset: str | None = None
    n: int | None = Field(default=None, ge=1)
    partition: Literal["random", "label_sorted"] = "random"
    partition_seed: int = Field(default=0, ge=0)
    mu: float = Field(default=1e-4, ge=0.0)
    normalize: bool = True

    @model_validator(mode="after")
    def _consistent(self):
        if self.kind == "quadratic":
            if self.dataset is not None:
                raise ValueError("a quadratic problem takes no dataset")
            if self.quadratic is None and self.instance is None:
                raise ValueError("quadratic problems need a 'quadratic' block or an 'instance' type")
            if self.instance is not None and self.quadratic is None:
                raise ValueError("'instance' needs a 'quadratic' block for n, d, mu and seed")
        else:
            if self.dataset is None:
                raise ValueError("logistic problems need a dataset path")
            if not Path(self.dataset).is_file():
                raise ValueError(f"dataset file not found: {self.dataset}")
            if self.n is None:
                raise ValueError("logistic problems need the client count n")
            if self.quadratic is not None or self.instance is not None:
                raise ValueError("quadratic settings given for a logistic problem")
        return self


Gamma = Union[float, Literal["theory"]]


class MethodBlock(_Strict):
    preset: Literal[methods.PRESETS]  # type: ignore[valid-type]
    gamma: Gamma | list[float] = "theory"
    tau: int | None = Field(default=None, ge=1)
    p: float | None = Field(default=None, gt=0.0, le=1.0)
    q: float | None = Field(default=None, gt=0.0, le=1.0)
    r: int | None = Field(default=None, ge=1)
    noise: float | None = Field(default=None, ge=0.0)
    full_gradients: bool = False
    coupled_updates: bool | None = None
    eta_weight: float | Literal["theory"] = 0.0

    @field_validator("gamma")
    @classmethod
    def _gamma(cls, v):
        vals = v if isinstance(v, list) else [v]
        if isinstance(v, list) and not v:
            raise ValueError("gamma list is empty")
        for g in vals:
            if g != "theory" and not (isinstance(g, (int, float)) and g > 0 and math.isfinite(g)):
                raise ValueError(f"gamma must be positive and finite, got {g}")
        return v

    @field_validator("eta_weight")
    @classmethod
    def _eta(cls, v):
        if v != "theory" and not 0.0 <= v < 1.0:
            raise ValueError("eta_weight must lie in [0, 1)")
        return v

    @model_validator(mode="after")
    def _one_loop(self):
        if self.tau is not None and self.p is not None:
            raise ValueError("give exactly one of tau and p")
        if self.noise is not None and self.full_gradients:
            raise ValueError("noise and full_gradients are exclusive")
        return self

    def spec(self, m: int | None = None, tau: int | None = None, p: float | None = None) -> methods.MethodSpec:
        if tau is None and p is None:
            tau, p = self.tau, self.p
        return methods.preset(self.preset, tau=tau, p=p, q=self.q, r=self.r, noise=self.noise,
                              full_gradients=self.full_gradients, coupled_updates=self.coupled_updates, m=m)


class RunBlock(_Strict):
    K: int = Field(ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    record_every: int = Field(default=1, ge=1)
    output: str = "run.csv"
    threads: int = Field(default=1, ge=1)
    x0: list[float] | None = None
    stop_gap: float | None = Field(default=None, gt=0.0)

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        for s in v:
            if not 0 <= s < 2**64:
                raise ValueError(f"seed {s} is not a 64-bit unsigned integer")
        return v


class TheoryBlock(_Strict):
    epsilon: float = Field(default=1e-6, gt=0.0)
    enabled: bool = True
    route: Literal["auto", "closed_form", "generic"] = "auto"


class SweepBlock(_Strict):
    gamma: list[float] | None = None
    tau: list[int] | None = None
    p: list[float] | None = None

    @model_validator(mode="after")
    def _loops(self):
        if self.tau is not None and self.p is not None:
            raise ValueError("sweep over tau or over p, not both")
        for g in self.gamma or []:
            if not g > 0:
                raise ValueError("swept gamma values must be positive")
        return self


class ExperimentConfig(_Strict):
    problem: ProblemBlock
    method: MethodBlock
    run: RunBlock
    theory: TheoryBlock = TheoryBlock()
    sweep: SweepBlock | None = None

    @model_validator(mode="after")
    def _x0(self):
        if self.run.x0 is not None and self.problem.quadratic is not None:
            if len(self.run.x0) != self.problem.quadratic.d:
                raise ValueError("x0 length does not match the dimension")
        if self.sweep is not None and self.sweep.p is not None and self.method.tau is not None:
            raise ValueError("sweeping p conflicts with a fixed tau")
        if self.sweep is not None and self.sweep.tau is not None and self.method.p is not None:
            raise ValueError("sweeping tau conflicts with a Bernoulli p")
        return self


def _format_error(exc: ValidationError) -> str:
    parts = []
    for e in exc.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_format_error(exc)}") from None


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))


def dump_config(cfg: ExperimentConfig) -> str:
    return cfg.model_dump_json(exclude_none=True)
