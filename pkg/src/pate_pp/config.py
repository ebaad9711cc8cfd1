"""Experiment configuration, validated with pydantic.

Errors are re-raised as :class:`ConfigError` whose message lists each
offending field path (``aggregation.sigma_check: ...``).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSource(_Strict):
    n_classes: int = Field(4, ge=2)
    n_per_class: int = Field(1000, ge=1)
    dim: int = Field(10, ge=2)
    spread: float = Field(0.1, ge=0)


class IdxSource(_Strict):
    images: str
    labels: str
    max_n: Optional[int] = Field(None, ge=1)
    n_classes: Optional[int] = Field(None, ge=2)


class CsvSource(_Strict):
    path: str
    label_column: str | int


class DataConfig(_Strict):
    source: Literal["synth", "idx", "csv"] = "synth"
    synth: SynthSource = SynthSource()
    idx: Optional[IdxSource] = None
    csv: Optional[CsvSource] = None
    # public pool = held-out test slice + student pool (queries + unlabeled)
    n_public: int = Field(3000, ge=2)
    n_test: int = Field(500, ge=1)
    n_queries: int = Field(600, ge=1)
    # extra uniform noise injected into the aggregated labels
    label_noise: float = Field(0.0, ge=0, lt=1)

    @model_validator(mode="after")
    def _check(self):
        if self.source == "idx" and self.idx is None:
            raise ValueError("source 'idx' needs an 'idx' section")
        if self.source == "csv" and self.csv is None:
            raise ValueError("source 'csv' needs a 'csv' section")
        if self.n_test + self.n_queries > self.n_public:
            raise ValueError("n_test + n_queries must not exceed n_public")
        return self


class TeacherConfig(_Strict):
    n_teachers: int = Field(50, ge=1)
    hidden: list[int] = [64]
    activation: Literal["relu", "leaky_relu", "tanh"] = "relu"
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.01, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"


class Budget(_Strict):
    epsilon: float = Field(gt=0)
    delta: float = Field(gt=0, lt=1)


class AggregationSection(_Strict):
    sigma_check: float = Field(150.0, ge=0)
    sigma_answer: float = Field(40.0, ge=0)
    # teacher-count units; null means 0.7 * n_teachers
    threshold: Optional[float] = Field(None, ge=0)
    mode: Literal["gnmax", "confident-gnmax"] = "confident-gnmax"
    budget: Optional[Budget] = None


class StudentSection(_Strict):
    d_hidden: list[int] = [64, 64]
    g_hidden: list[int] = [64, 64]
    latent_dim: int = Field(16, ge=1)
    batch_size: int = Field(100, ge=1)
    lr: float = Field(0.01, ge=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    epochs: int = Field(30, ge=0)
    retrain_epochs: Optional[int] = Field(None, ge=0)


class RobustSection(_Strict):
    beta: float = Field(0.2, ge=0, lt=1)
    ramp_epochs: int = Field(15, ge=1)
    alpha: float = Field(0.9, gt=0, le=1)
    tau: float = Field(0.3, ge=0, lt=1)
    count_rule: Literal["decay", "scaled"] = "decay"


class PrivacySection(_Strict):
    delta: float = Field(1e-5, gt=0, lt=1)


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    mode: Literal["pate", "coteach", "pate+", "pate++"] = "pate++"
    output_dir: str = "out"
    repeats: int = Field(1, ge=1)
    data: DataConfig = DataConfig()
    teachers: TeacherConfig = TeacherConfig()
    aggregation: AggregationSection = AggregationSection()
    student: StudentSection = StudentSection()
    robust: RobustSection = RobustSection()
    privacy: PrivacySection = PrivacySection()


def _format(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>: config must be a JSON object")
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path) -> tuple[ExperimentConfig, dict]:
    """Parse a config file; returns the validated config and the raw document."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw), raw
