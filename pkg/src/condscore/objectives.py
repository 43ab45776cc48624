"""Denoising score-matching objectives for unconditional and conditional scores.

Four estimators share one code path:

* ``DSM``    - unconditional score of x; the model sees ``x_t``.
* ``CDE``    - conditional denoising: x is diffused, y stays clean and is fed
  to the model alongside ``x_t``.  Represented as a two-block spec whose y
  block is frozen.
* ``CDIFFE`` - joint score of ``(x_t, y_t)`` with both blocks diffused at the
  same speed.
* ``CMDE``   - as CDIFFE but y has its own (usually slower) schedule; the
  weighting becomes a blockwise-diagonal matrix.

Losses are summed block by block in a fixed order, so estimators that reduce
to one another (CMDE with equal speeds vs CDIFFE, CMDE with frozen y vs CDE)
produce bit-identical values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .schedules import TimeMode, draw_time
from ._rng import stream
from .sde import (
    MultiBlockSdeSpec,
    SdeBlock,
    VeSdeSpec,
    _as_col,
    joint_transition_sample,
    marginal_variance,
    transition_score,
)


class EstimatorKind(str, Enum):
    DSM = "dsm"
    CDE = "cde"
    CDIFFE = "cdiffe"
    CMDE = "cmde"


class WeightingKind(str, Enum):
    UNIT = "unit"
    MLE = "mle"


@dataclass(frozen=True)
class ObjectiveConfig:
    estimator_kind: EstimatorKind
    weighting_kind: WeightingKind = WeightingKind.MLE
    time_mode: TimeMode = field(default_factory=TimeMode)
    # Network input scaled by 1/sqrt(data_std^2 + var(t)) and output by 1/std(t)
    precondition: bool = True
    data_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "estimator_kind", EstimatorKind(self.estimator_kind))
        object.__setattr__(self, "weighting_kind", WeightingKind(self.weighting_kind))

    @property
    def joint(self) -> bool:
        return self.estimator_kind in (EstimatorKind.CDIFFE, EstimatorKind.CMDE)


def validate(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec) -> None:
    kind = cfg.estimator_kind
    names = [b.name for b in mspec.blocks]
    if kind is EstimatorKind.DSM:
        if names[0] != "x":
            raise ConfigError("DSM needs the x block first")
        return
    if names != ["x", "y"]:
        raise ConfigError(f"{kind.value} needs blocks ('x', 'y'), got {names}")
    x_spec, y_spec = mspec.blocks[0].spec, mspec.blocks[1].spec
    if kind is EstimatorKind.CDE and not y_spec.frozen:
        raise ConfigError("CDE requires an undiffused (frozen) y block")
    if kind is EstimatorKind.CDIFFE and x_spec != y_spec:
        raise ConfigError("CDIFFE requires identical x and y schedules")


def input_blocks(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec) -> list[tuple[SdeBlock, slice]]:
    """Blocks of z fed to the network (in order)."""
    if cfg.estimator_kind is EstimatorKind.DSM:
        return [next(mspec.slices())]
    return list(mspec.slices())


def output_blocks(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec) -> list[tuple[SdeBlock, slice]]:
    """Blocks of z spanned by the network output (in order)."""
    if cfg.joint:
        return list(mspec.slices())
    return [next(mspec.slices())]


def input_dim(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec) -> int:
    return sum(b.dim for b, _ in input_blocks(cfg, mspec))


def output_dim(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec) -> int:
    return sum(b.dim for b, _ in output_blocks(cfg, mspec))


# ---------------------------------------------------------------- weighting


def dsm_weight(kind: WeightingKind, spec: VeSdeSpec, t):
    """lambda(t): 1 for UNIT, the kernel variance sigma(t)^2 - sigma_min^2 for MLE."""
    if WeightingKind(kind) is WeightingKind.UNIT:
        return np.ones_like(np.asarray(t, dtype=np.float64))[()] * 1.0
    return marginal_variance(spec, t)


@dataclass(frozen=True)
class WeightMatrix:
    """Diagonal weighting; off-diagonal entries are zero by construction."""

    diag: np.ndarray

    def dense(self) -> np.ndarray:
        return np.diag(self.diag)

    def quadratic_form(self, v: np.ndarray) -> np.ndarray:
        return np.sum(self.diag * v * v, axis=-1)


def _block_weight(kind: WeightingKind, spec: VeSdeSpec, t):
    return dsm_weight(kind, spec, t)


def mle_weight_matrix(mspec: MultiBlockSdeSpec, t) -> WeightMatrix:
    """Blockwise likelihood weighting: each block's kernel variance on its diagonal."""
    if len(mspec.blocks) != 2:
        raise ConfigError("the likelihood weighting matrix needs exactly two blocks")
    t_arr = np.asarray(t, dtype=np.float64)
    diag = np.empty(t_arr.shape + (mspec.total_dim,))
    for b, sl in mspec.slices():
        diag[..., sl] = np.asarray(_block_weight(WeightingKind.MLE, b.spec, t_arr))[..., None]
    return WeightMatrix(diag)


def weight_matrix(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec, t) -> WeightMatrix:
    """Diagonal weights over the model-output coordinates; zero on frozen blocks."""
    t_arr = np.asarray(t, dtype=np.float64)
    blocks = output_blocks(cfg, mspec)
    diag = np.zeros(t_arr.shape + (sum(b.dim for b, _ in blocks),))
    start = 0
    for b, _ in blocks:
        if not b.spec.frozen:
            w = np.asarray(_block_weight(cfg.weighting_kind, b.spec, t_arr))
            diag[..., start : start + b.dim] = w[..., None]
        start += b.dim
    return WeightMatrix(diag)


# ------------------------------------------------------------------ scaling


def input_scale(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec, t) -> np.ndarray | float:
    if not cfg.precondition:
        return 1.0
    t_arr = np.asarray(t, dtype=np.float64)
    blocks = input_blocks(cfg, mspec)
    out = np.empty(t_arr.shape + (sum(b.dim for b, _ in blocks),))
    start = 0
    for b, _ in blocks:
        var = np.asarray(marginal_variance(b.spec, t_arr))
        out[..., start : start + b.dim] = (1.0 / np.sqrt(cfg.data_std**2 + var))[..., None]
        start += b.dim
    return out


def output_scale(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec, t) -> np.ndarray | float:
    if not cfg.precondition:
        return 1.0
    t_arr = np.asarray(t, dtype=np.float64)
    blocks = output_blocks(cfg, mspec)
    out = np.ones(t_arr.shape + (sum(b.dim for b, _ in blocks),))
    start = 0
    for b, _ in blocks:
        if not b.spec.frozen:
            std = np.sqrt(np.asarray(marginal_variance(b.spec, t_arr)))
            out[..., start : start + b.dim] = (1.0 / std)[..., None]
        start += b.dim
    return out


def model_input(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec, noised: np.ndarray) -> np.ndarray:
    """Slice the network input (unscaled) out of a diffused z."""
    blocks = input_blocks(cfg, mspec)
    if len(blocks) == len(mspec.blocks):
        return noised
    return np.concatenate([noised[..., sl] for _, sl in blocks], axis=-1)


# -------------------------------------------------------------------- losses


@dataclass(frozen=True)
class TrainingBatch:
    """Diffused training examples; ``clean`` and ``noised`` span all blocks of z."""

    t: np.ndarray
    clean: np.ndarray
    noised: np.ndarray

    def __len__(self):
        return len(self.t)


def target_score(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec, t, clean, noised) -> np.ndarray:
    """Kernel score on the output coordinates; zero on frozen blocks."""
    clean = np.asarray(clean, dtype=np.float64)
    noised = np.asarray(noised, dtype=np.float64)
    parts = []
    for b, sl in output_blocks(cfg, mspec):
        if b.spec.frozen:
            parts.append(np.zeros_like(clean[..., sl]))
        else:
            parts.append(transition_score(b.spec, clean[..., sl], noised[..., sl], t))
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)


def _check_contract(cfg, mspec, clean, noised, model_out):
    mspec.check_dim(clean)
    mspec.check_dim(noised)
    want = output_dim(cfg, mspec)
    if model_out.shape[-1] != want:
        raise ShapeError(f"model output has dim {model_out.shape[-1]}, expected {want}")
    if cfg.estimator_kind is EstimatorKind.CDE:
        sl = mspec.block_slice("y")
        if not np.array_equal(clean[..., sl], noised[..., sl]):
            raise ContractError("CDE requires the condition y to be carried undiffused")


def weighted_residuals(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec, t, clean, noised, model_out):
    """Per diffused output block: (output slice, residual target - model_out, weight)."""
    clean = np.asarray(clean, dtype=np.float64)
    noised = np.asarray(noised, dtype=np.float64)
    model_out = np.asarray(model_out, dtype=np.float64)
    _check_contract(cfg, mspec, clean, noised, model_out)
    out = []
    start = 0
    for b, sl in output_blocks(cfg, mspec):
        osl = slice(start, start + b.dim)
        start += b.dim
        if b.spec.frozen:
            continue
        target = transition_score(b.spec, clean[..., sl], noised[..., sl], t)
        w = _as_col(np.asarray(_block_weight(cfg.weighting_kind, b.spec, t)), target)
        out.append((osl, target - model_out[..., osl], w))
    return out


def per_sample_loss(cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec, t, clean, noised, model_out):
    """0.5 * v^T W v with v = kernel score - model output, over diffused coordinates."""
    total = 0.0
    for _, v, w in weighted_residuals(cfg, mspec, t, clean, noised, model_out):
        total = total + np.sum(w * v * v, axis=-1)
    return 0.5 * total


def make_training_sample(
    cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec, x0, y, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Draw t and the diffused example for a batch of (x0, y) pairs.

    Returns ``(t, clean, noised, target)``; ``target`` covers the model-output
    coordinates.  Rows of ``x0``/``y`` are examples; 1-D inputs give one example.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    x0 = np.atleast_2d(x0)
    if cfg.estimator_kind is EstimatorKind.DSM and len(mspec.blocks) == 1:
        clean = x0
    else:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if y.shape[0] != x0.shape[0]:
            raise ShapeError("x0 and y batch sizes differ")
        clean = np.concatenate([x0, y], axis=-1)
    mspec.check_dim(clean)
    t = draw_time(cfg.time_mode, stream(seed, "time"), size=x0.shape[0])
    noised = joint_transition_sample(mspec, clean, t, seed)
    target = target_score(cfg, mspec, t, clean, noised)
    if single:
        return t[0], clean[0], noised[0], target[0]
    return t, clean, noised, target


def make_training_batch(cfg, mspec, x0, y, seed: int) -> TrainingBatch:
    t, clean, noised, _ = make_training_sample(cfg, mspec, x0, y, seed)
    return TrainingBatch(np.atleast_1d(t), np.atleast_2d(clean), np.atleast_2d(noised))
