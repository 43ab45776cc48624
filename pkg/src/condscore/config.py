"""Experiment configuration documents (YAML or JSON) and their translation to runtime specs."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ._rng import stream
from .errors import ConfigError
from .network import MlpSpec
from .objectives import EstimatorKind, ObjectiveConfig, output_dim, input_dim
from .oracles import GaussianSpec, GmmSpec
from .samplers import SamplerConfig
from .schedules import TimeMode, VsSchedule
from .sde import MultiBlockSdeSpec, VeSdeSpec
from .tasks import ForwardOperator, OperatorKind

ESTIMATOR_ALIASES = {"dse": "dsm"}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ComponentConfig(_Strict):
    weight: float
    mean: list[float]
    cov: list[list[float]]


class BaseDistributionConfig(_Strict):
    kind: Literal["gaussian", "gmm"] = "gaussian"
    dim: int = 2
    mean: Optional[list[float]] = None
    cov: Optional[list[list[float]]] = None
    # used when cov is omitted: cov_ij = scale^2 * ar1_rho^|i-j|
    ar1_rho: float = 0.0
    scale: float = 1.0
    components: Optional[list[ComponentConfig]] = None


class TaskConfig(_Strict):
    kind: Literal["mask", "pool", "linear"] = "mask"
    mask_fraction: float = 0.25
    pool_k: int = 2
    n_y: Optional[int] = None
    matrix: Optional[list[list[float]]] = None
    noise_std: float = 0.0
    data_range: float = 4.0


class SdeConfig(_Strict):
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    sigma_y_max: Optional[float] = None
    horizon_T: float = 1.0


class ScheduleConfig(_Strict):
    time_mode: Literal["continuous", "discrete"] = "continuous"
    n_grid: int = 1000
    eps: float = 1e-5
    vs_iterations: Optional[int] = None
    vs_sigma_max_initial: Optional[float] = None


class NetworkConfig(_Strict):
    hidden_widths: list[int] = Field(default_factory=lambda: [128, 128, 128])
    time_features: int = 8


class OptimizerConfig(_Strict):
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    ema_rate: float = 0.999
    batch_size: int = 100
    n_steps: int = 20000
    lr_decay: Literal["constant", "cosine"] = "constant"
    weighting: Literal["mle", "unit"] = "mle"
    precondition: bool = True


class SamplerSettings(_Strict):
    n_steps: int = 1000
    corrector_steps: int = 1
    snr: float = 0.16
    t_end: float = 1e-5
    use_ema: bool = True
    resample_y_in_corrector: bool = True
    denoise_final: bool = False


class ExperimentConfig(_Strict):
    task: TaskConfig = Field(default_factory=TaskConfig)
    base: BaseDistributionConfig = Field(default_factory=BaseDistributionConfig)
    estimator: Literal["dsm", "cde", "cdiffe", "cmde", "vs-cmde"] = "cde"
    sde: SdeConfig = Field(default_factory=SdeConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    sampler: SamplerSettings = Field(default_factory=SamplerSettings)
    n_train: int = 20000
    n_eval: int = 5000
    k_reconstructions: int = 5
    seed: int = 0

    @field_validator("estimator", mode="before")
    @classmethod
    def _alias(cls, v):
        return ESTIMATOR_ALIASES.get(v, v)

    @model_validator(mode="after")
    def _check(self):
        if self.k_reconstructions < 2:
            raise ValueError("k_reconstructions must be >= 2")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("n_train and n_eval must be positive")
        if self.estimator in ("cmde", "vs-cmde") and self.sde.sigma_y_max is None:
            raise ValueError(f"{self.estimator} needs sde.sigma_y_max")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        return self

    def with_overrides(self, **kw) -> "ExperimentConfig":
        data = self.model_dump()
        for key, value in kw.items():
            if value is None:
                continue
            if key == "sigma_y_max":
                data["sde"]["sigma_y_max"] = value
            else:
                data[key] = value
        return ExperimentConfig.model_validate(data)


def load_config(path) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text())
    try:
        return ExperimentConfig.model_validate(data or {})
    except Exception as exc:  # pydantic.ValidationError
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=False)


# ------------------------------------------------------------ builders


def build_base(cfg: ExperimentConfig) -> GaussianSpec | GmmSpec:
    b = cfg.base
    if b.kind == "gmm":
        if not b.components:
            raise ConfigError("gmm base needs components")
        return GmmSpec(
            np.array([c.weight for c in b.components]),
            tuple(GaussianSpec(np.array(c.mean), np.array(c.cov)) for c in b.components),
        )
    mean = np.zeros(b.dim) if b.mean is None else np.array(b.mean, dtype=np.float64)
    if b.cov is not None:
        cov = np.array(b.cov, dtype=np.float64)
    else:
        idx = np.arange(b.dim)
        cov = b.scale**2 * b.ar1_rho ** np.abs(idx[:, None] - idx[None, :])
    return GaussianSpec(mean, cov)


def build_operator(cfg: ExperimentConfig) -> ForwardOperator:
    t = cfg.task
    n_x = cfg.base.dim if cfg.base.kind == "gaussian" else len(cfg.base.components[0].mean)
    kind = OperatorKind(t.kind)
    if kind is OperatorKind.LINEAR:
        if t.matrix is not None:
            matrix = np.array(t.matrix, dtype=np.float64)
        else:
            if t.n_y is None:
                raise ConfigError("linear task needs a matrix or n_y")
            rng = stream(cfg.seed, "operator-matrix")
            matrix = rng.standard_normal((t.n_y, n_x)) / np.sqrt(n_x)
        return ForwardOperator(kind, n_x, matrix=matrix, noise_std=t.noise_std)
    return ForwardOperator(kind, n_x, mask_fraction=t.mask_fraction, pool_k=t.pool_k, noise_std=t.noise_std)


def estimator_kind(cfg: ExperimentConfig) -> EstimatorKind:
    return EstimatorKind.CMDE if cfg.estimator == "vs-cmde" else EstimatorKind(cfg.estimator)


def x_spec(cfg: ExperimentConfig) -> VeSdeSpec:
    return VeSdeSpec(cfg.sde.sigma_min, cfg.sde.sigma_max, cfg.sde.horizon_T)


def y_sigma_max(cfg: ExperimentConfig) -> float:
    """sigma_max of the condition's diffusion at sampling time."""
    if cfg.estimator == "dsm":
        return 0.0
    if cfg.estimator == "cde":
        return cfg.sde.sigma_min
    if cfg.estimator == "cdiffe":
        return cfg.sde.sigma_max
    return cfg.sde.sigma_y_max


def build_mspec(cfg: ExperimentConfig, n_y: int) -> MultiBlockSdeSpec:
    """Block layout used for sampling (and for training, except VS-CMDE)."""
    xs = x_spec(cfg)
    n_x = build_operator(cfg).n_x
    if cfg.estimator == "dsm":
        return MultiBlockSdeSpec.single(n_x, xs)
    if cfg.estimator == "cdiffe":
        ys = xs
    else:
        ys = VeSdeSpec(cfg.sde.sigma_min, y_sigma_max(cfg), cfg.sde.horizon_T)
    return MultiBlockSdeSpec.two_block(n_x, xs, n_y, ys)


def build_vs_schedule(cfg: ExperimentConfig) -> VsSchedule | None:
    if cfg.estimator != "vs-cmde":
        return None
    s = cfg.schedule
    return VsSchedule(
        M=s.vs_iterations or cfg.optimizer.n_steps,
        sigma_max_initial=s.vs_sigma_max_initial or cfg.sde.sigma_max,
        sigma_max_target=cfg.sde.sigma_y_max,
    )


def build_objective(cfg: ExperimentConfig) -> ObjectiveConfig:
    s = cfg.schedule
    return ObjectiveConfig(
        estimator_kind(cfg),
        cfg.optimizer.weighting,
        TimeMode(s.time_mode, s.n_grid, s.eps, cfg.sde.horizon_T),
        precondition=cfg.optimizer.precondition,
    )


def build_network_spec(cfg: ExperimentConfig, objective: ObjectiveConfig, mspec: MultiBlockSdeSpec) -> MlpSpec:
    return MlpSpec(
        input_dim(objective, mspec),
        output_dim(objective, mspec),
        tuple(cfg.network.hidden_widths),
        cfg.network.time_features,
    )


def build_sampler_config(cfg: ExperimentConfig) -> SamplerConfig:
    return SamplerConfig(**cfg.sampler.model_dump())
