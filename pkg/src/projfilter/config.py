"""Experiment configuration: JSON documents validated by pydantic.

Unknown keys are rejected everywhere.  Example-dependent defaults (prior,
measurement, dt, step count) are filled in by :func:`resolve`.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

EXAMPLES = ("example-a", "example-b", "linear-gaussian", "custom")

EXAMPLE_DEFAULTS = {
    "example-a": {"prior_mean": [1.0, 1.0], "prior_cov": [[1.0, 0.0], [0.0, 1.0]], "y": [0.0, 0.0],
                  "n_o": 4, "dt": 1.25e-2, "n_steps": 400},
    # y defaults to h(prior mean)
    "example-b": {"prior_mean": [0.5, -0.5], "prior_cov": [[5e-2, 0.0], [0.0, 5e-2]], "y": None,
                  "n_o": 2, "dt": 5e-2, "n_steps": 100},
    "linear-gaussian": {"prior_mean": [0.0, 0.0], "prior_cov": [[1.0, 0.0], [0.0, 1.0]], "y": [1.0, -0.5],
                        "n_o": 2, "dt": 0.1, "n_steps": 150},
    "custom": {"prior_mean": [0.0, 0.0], "prior_cov": [[1.0, 0.0], [0.0, 1.0]], "y": [0.0, 0.0],
               "n_o": 2, "dt": 5e-2, "n_steps": 100},
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BaselineConfig(_Strict):
    method: Literal["unscented", "gauss-hermite", "particle"]
    order: int = Field(17, ge=1)
    n_particles: int = Field(48000, ge=1)
    seed: Optional[int] = Field(None, ge=0)
    ut_alpha: float = Field(1.0, gt=0)
    ut_beta: float = 2.0
    ut_kappa: Optional[float] = None


class RegionConfig(_Strict):
    lo: list[float]
    hi: list[float]


class ExampleBParams(_Strict):
    z0: float = 0.2
    R: list[float] = [2e-2, 4e-1, 4e-1]
    r_as_std: bool = True


class ExampleAParams(_Strict):
    sigma_y: float = Field(0.5, gt=0)


class LinearGaussianParams(_Strict):
    H: list[list[float]] = [[1.0, 0.5], [0.0, 1.0]]
    R: list[list[float]] = [[0.5, 0.0], [0.0, 0.3]]


class ExperimentConfig(_Strict):
    example: Literal["example-a", "example-b", "linear-gaussian", "custom"] = "example-a"
    n_o: Optional[int] = Field(None, ge=2, le=8)
    quad_level: int = Field(6, ge=0, le=6)
    alpha: Literal[0.5, 1.0] = 0.5
    gradient: Literal["riemannian", "euclidean"] = "riemannian"
    solver: Literal["euler", "adaptive_rk"] = "euler"
    delta: float = Field(1.0, gt=0)
    dt: Optional[float] = Field(None, gt=0)
    n_steps: Optional[int] = Field(None, ge=0)
    metric_stride: int = Field(1, ge=1)
    baselines: list[BaselineConfig] = []
    region: Optional[RegionConfig] = None
    resolution: int = Field(500, ge=8)
    half_width_sd: float = Field(13.0, gt=0)
    output_dir: Optional[str] = None
    seed: int = Field(0, ge=0)
    prior_mean: Optional[list[float]] = None
    prior_cov: Optional[list[list[float]]] = None
    y: Optional[list[float]] = None
    example_a: ExampleAParams = ExampleAParams()
    example_b: ExampleBParams = ExampleBParams()
    linear_gaussian: LinearGaussianParams = LinearGaussianParams()
    # "module:function" returning l(x, y) for rows of x
    custom_likelihood: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.example == "custom" and not self.custom_likelihood:
            raise ValueError("example 'custom' needs custom_likelihood = 'module:function'")
        if self.prior_cov is not None:
            cov = np.asarray(self.prior_cov, dtype=float)
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise ValueError("prior_cov must be a square matrix")
        return self


class TableRow(_Strict):
    method: Literal["unscented", "gauss-hermite", "renyi", "particle"]
    label: Optional[str] = None
    n_o: int = Field(2, ge=2, le=8)
    alpha: Literal[0.5, 1.0] = 0.5
    solver: Literal["euler", "adaptive_rk"] = "euler"
    iterations: int = Field(1, ge=0)
    order: int = Field(17, ge=1)
    n_particles: int = Field(48000, ge=1)
    seed: Optional[int] = Field(None, ge=0)


class TableConfig(_Strict):
    experiment: ExperimentConfig = ExperimentConfig()
    rows: Optional[list[TableRow]] = None


class PolyTerm(_Strict):
    exponent: list[int]
    coef: float

    @field_validator("exponent")
    @classmethod
    def _nonneg(cls, v):
        if any(e < 0 for e in v):
            raise ValueError("exponents must be nonnegative")
        return v


class SDEConfig(_Strict):
    drift: list[list[PolyTerm]]
    diffusion: list[list[float]]


class PropagateConfig(_Strict):
    sde: SDEConfig
    n_o: int = Field(2, ge=2, le=8)
    quad_level: int = Field(6, ge=0, le=6)
    initial_mean: list[float]
    initial_cov: list[list[float]]
    delta_t: float = Field(1.0, ge=0)
    n_substeps: Optional[int] = Field(None, ge=1)
    solver: Literal["euler", "adaptive_rk"] = "euler"
    output_dir: Optional[str] = None


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def validate(model_cls, data: dict):
    try:
        return model_cls.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill example-dependent defaults; the result has no ``None`` in resolvable fields."""
    d = EXAMPLE_DEFAULTS[cfg.example]
    updates = {}
    for key in ("prior_mean", "prior_cov", "y", "n_o", "dt", "n_steps"):
        if getattr(cfg, key) is None and d[key] is not None:
            updates[key] = d[key]
    return cfg.model_copy(update=updates)


def json_schemas() -> dict:
    return {
        "ExperimentConfig": ExperimentConfig.model_json_schema(),
        "TableConfig": TableConfig.model_json_schema(),
        "PropagateConfig": PropagateConfig.model_json_schema(),
    }
