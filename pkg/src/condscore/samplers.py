"""Reverse-time predictor-corrector sampling, unconditional and conditional.

Chains are rows of one state matrix.  Every random draw is keyed by
``(seed, purpose, step[, sub-step])`` and filled row by row, so row ``i`` of a
run does not depend on how many rows follow it.

Conditional sampling with a diffused condition (CDIFFE, CMDE) never integrates
the condition: at each score evaluation a fresh ``y_hat_t ~ p(y_t | y)`` is drawn
from the y-block kernel and only the x-block of the joint score is used.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._rng import stream
from .errors import ConfigError, DomainError, ShapeError
from .network import MlpSpec, score_output
from .objectives import EstimatorKind, ObjectiveConfig, output_dim
from .oracles import (
    GaussianSpec,
    GmmSpec,
    JointGaussianSpec,
    conditional_score_given_clean_y,
    conditional_score_given_diffused_y,
    gaussian_diffused_score,
    gmm_diffused_score,
    joint_diffused_score,
)
from .sde import (
    EPS_TIME,
    MultiBlockSdeSpec,
    VeSdeSpec,
    instantaneous_diffusion,
    marginal_std,
    marginal_variance,
    prior_sample,
)


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 1000
    corrector_steps: int = 1
    snr: float = 0.16
    t_end: float = EPS_TIME
    use_ema: bool = True
    resample_y_in_corrector: bool = True
    denoise_final: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.corrector_steps < 0:
            raise ConfigError("corrector_steps must be >= 0")
        if not self.snr > 0:
            raise ConfigError("snr must be positive")
        if not self.t_end > 0:
            raise ConfigError("t_end must be positive")


@dataclass(frozen=True)
class ScoreSource:
    """A score function ``fn(model_input, t) -> score`` plus what it spans.

    ``model_input`` is ``x`` (DSM), ``(x, y)`` (CDE) or ``(x, y_t)`` (CDIFFE/CMDE);
    the output spans x for DSM/CDE and ``(x, y)`` for the joint estimators.
    """

    fn: Callable[[np.ndarray, float], np.ndarray]
    estimator_kind: EstimatorKind
    n_x: int
    n_y: int = 0

    def __post_init__(self):
        object.__setattr__(self, "estimator_kind", EstimatorKind(self.estimator_kind))

    @property
    def output_dim(self) -> int:
        joint = self.estimator_kind in (EstimatorKind.CDIFFE, EstimatorKind.CMDE)
        return self.n_x + (self.n_y if joint else 0)

    def __call__(self, inp: np.ndarray, t: float) -> np.ndarray:
        out = self.fn(inp, t)
        if out.shape != (inp.shape[0], self.output_dim):
            raise ShapeError(f"score source returned {out.shape}, expected ({inp.shape[0]}, {self.output_dim})")
        return out


def network_source(params, spec: MlpSpec, cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec) -> ScoreSource:
    n_x = mspec.block("x").dim
    n_y = mspec.block("y").dim if len(mspec.blocks) > 1 else 0
    if spec.output_dim != output_dim(cfg, mspec):
        raise ConfigError("network output does not match the estimator")

    def fn(inp, t):
        if cfg.estimator_kind is EstimatorKind.DSM and len(mspec.blocks) > 1:
            inp = np.concatenate([inp, np.zeros((inp.shape[0], n_y))], axis=1)
        return score_output(params, spec, cfg, mspec, inp, t)

    return ScoreSource(fn, cfg.estimator_kind, n_x, n_y)


def gaussian_source(g: GaussianSpec, spec: VeSdeSpec) -> ScoreSource:
    return ScoreSource(lambda x, t: gaussian_diffused_score(g, spec, t, x), EstimatorKind.DSM, g.dim)


def gmm_source(m: GmmSpec, spec: VeSdeSpec) -> ScoreSource:
    return ScoreSource(lambda x, t: gmm_diffused_score(m, spec, t, x), EstimatorKind.DSM, m.dim)


def cde_oracle_source(j: JointGaussianSpec, mspec: MultiBlockSdeSpec) -> ScoreSource:
    nx = j.n_x

    def fn(inp, t):
        return conditional_score_given_clean_y(j, mspec, t, inp[:, :nx], inp[:, nx:])

    return ScoreSource(fn, EstimatorKind.CDE, j.n_x, j.n_y)


def joint_oracle_source(j: JointGaussianSpec, mspec: MultiBlockSdeSpec,
                        kind: EstimatorKind = EstimatorKind.CMDE) -> ScoreSource:
    nx = j.n_x

    def fn(inp, t):
        x_part = conditional_score_given_diffused_y(j, mspec, t, inp[:, :nx], inp[:, nx:])
        y_part = joint_diffused_score(j, mspec, t, inp)[:, nx:]
        return np.concatenate([x_part, y_part], axis=1)

    return ScoreSource(fn, kind, j.n_x, j.n_y)


# ------------------------------------------------------------------ steps


def predictor_step(score, x, spec: VeSdeSpec, t: float, dt: float, z) -> np.ndarray:
    """Euler-Maruyama step of the reverse SDE from t to t - dt (zero drift)."""
    if not dt > 0:
        raise DomainError("dt must be positive")
    if t - dt < -1e-12:
        raise DomainError("step would pass t = 0")
    g = instantaneous_diffusion(spec, t)
    return x + (g * g * dt) * score + (g * np.sqrt(dt)) * z


def corrector_step(score, x, snr: float, z) -> np.ndarray:
    """One Langevin step with step size 2 (snr |z| / |score|)^2.

    For a batch of chains the norms are averaged over rows; for a single
    vector this is exactly the per-vector rule.  Zero score skips the step.
    """
    score = np.asarray(score, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    g_rows = np.linalg.norm(np.atleast_2d(score), axis=-1)
    ok = np.isfinite(g_rows)
    if not ok.any():
        return x + score
    # a blown-up chain must not shrink everyone's step; it is caught by the caller
    g_norm = float(np.mean(g_rows[ok]))
    z_norm = float(np.mean(np.linalg.norm(np.atleast_2d(z), axis=-1)[ok]))
    if g_norm == 0.0:
        return np.array(x, dtype=np.float64, copy=True)
    delta = 2.0 * (snr * z_norm / g_norm) ** 2
    return x + delta * score + np.sqrt(2.0 * delta) * z


def time_grid(cfg: SamplerConfig, T: float) -> np.ndarray:
    if not cfg.t_end < T:
        raise ConfigError("t_end must be below T")
    return np.linspace(T, cfg.t_end, cfg.n_steps + 1)


# --------------------------------------------------------------- drivers


def _run_chains(x, x_spec: VeSdeSpec, cfg: SamplerConfig, seed, score_at):
    """Shared predictor-corrector loop; ``score_at(x_rows, t, rows, tag)`` returns x-scores."""
    ts = time_grid(cfg, x_spec.horizon_T)
    alive = np.ones(x.shape[0], dtype=bool)

    def guard(new, i, t):
        bad = alive & ~np.all(np.isfinite(new), axis=1)
        if bad.any():
            warnings.warn(
                f"{int(bad.sum())} chain(s) became non-finite at step {i} (t={t:.6g}); aborted",
                RuntimeWarning,
                stacklevel=3,
            )
            alive[bad] = False
            new[bad] = np.nan
        return new

    for i in range(cfg.n_steps):
        t, t_next = ts[i], ts[i + 1]
        rows = np.flatnonzero(alive)
        score = score_at(x[rows], t, rows, ("pred", i))
        z = stream(seed, "predictor", i).standard_normal(x.shape)[rows]
        new = x.copy()
        new[rows] = predictor_step(score, x[rows], x_spec, t, t - t_next, z)
        x = guard(new, i, t)
        for j in range(cfg.corrector_steps):
            rows = np.flatnonzero(alive)
            score = score_at(x[rows], t_next, rows, ("corr", i, j))
            z = stream(seed, "corrector", i, j).standard_normal(x.shape)[rows]
            new = x.copy()
            new[rows] = corrector_step(score, x[rows], cfg.snr, z)
            x = guard(new, i, t_next)
    if cfg.denoise_final:
        rows = np.flatnonzero(alive)
        t = ts[-1]
        x = x.copy()
        x[rows] = x[rows] + marginal_variance(x_spec, t) * score_at(x[rows], t, rows, ("final",))
    return x


def sample_unconditional(source: ScoreSource, spec: VeSdeSpec, cfg: SamplerConfig,
                         n_samples: int, seed) -> np.ndarray:
    if source.estimator_kind is not EstimatorKind.DSM:
        raise ConfigError("unconditional sampling needs a DSM score source")
    mspec = MultiBlockSdeSpec.single(source.n_x, spec)
    x = prior_sample(mspec, seed, n_samples)

    def score_at(xr, t, rows, tag):
        return source(xr, t)

    return _run_chains(x, spec, cfg, seed, score_at)


def sample_conditional(source: ScoreSource, mspec: MultiBlockSdeSpec, y, cfg: SamplerConfig,
                       estimator_kind, n_samples: int | None, seed) -> np.ndarray:
    """Draw x given y.  ``y`` is one condition (repeated ``n_samples`` times) or one row per chain."""
    kind = EstimatorKind(estimator_kind)
    if kind is EstimatorKind.DSM or source.estimator_kind is not kind:
        raise ConfigError(f"score source ({source.estimator_kind.value}) does not match estimator {kind.value}")
    x_block, y_block = mspec.block("x"), mspec.block("y")
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        if n_samples is None:
            raise ConfigError("n_samples is required for a single condition")
        y = np.broadcast_to(y, (n_samples, y.size))
    if y.shape[1] != y_block.dim:
        raise ShapeError(f"condition has dim {y.shape[1]}, y block has {y_block.dim}")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ShapeError("number of condition rows differs from n_samples")
    n = y.shape[0]
    x = prior_sample(MultiBlockSdeSpec((x_block,)), seed, n)
    nx = x_block.dim
    y_spec = y_block.spec

    def y_hat(t, rows, tag):
        if kind is EstimatorKind.CDE or y_spec.frozen:
            return y[rows]
        if cfg.resample_y_in_corrector:
            zy = stream(seed, "yhat", *[_tag_index(p) for p in tag])
        else:
            # one draw per grid time, shared by every evaluation at that time
            zy = stream(seed, "yhat-grid", _grid_index(tag))
        return y[rows] + marginal_std(y_spec, t) * zy.standard_normal(y.shape)[rows]

    def score_at(xr, t, rows, tag):
        inp = np.concatenate([xr, y_hat(t, rows, tag)], axis=1)
        return source(inp, t)[:, :nx]

    return _run_chains(x, x_block.spec, cfg, seed, score_at)


def _tag_index(part) -> int:
    if isinstance(part, str):
        return {"pred": 0, "corr": 1, "final": 2}[part]
    return int(part)


def _grid_index(tag) -> int:
    if tag[0] == "pred":
        return tag[1]
    if tag[0] == "corr":
        return tag[1] + 1
    return -1
