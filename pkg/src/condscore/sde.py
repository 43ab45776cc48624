"""Variance-exploding forward diffusions, single- and multi-block.

A VE SDE has zero drift and noise scale

    sigma(t) = sigma_min * (sigma_max / sigma_min) ** (t / T)

so the transition kernel is ``p(x_t | x_0) = N(x_0, (sigma(t)^2 - sigma_min^2) I)``.
A :class:`MultiBlockSdeSpec` lets separate coordinate blocks (data ``x`` and
condition ``y``) diffuse at different speeds.  A block whose spec has
``sigma_max == sigma_min`` is *frozen*: it never moves.

All functions accept a scalar ``t`` or an array of per-row times; vectors may
carry leading batch dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from ._rng import as_generator, stream
from .errors import ConfigError, DomainError, ShapeError, SingularKernelError

EPS_TIME = 1e-5


@dataclass(frozen=True)
class VeSdeSpec:
    sigma_min: float
    sigma_max: float
    horizon_T: float = 1.0

    def __post_init__(self):
        if not (self.sigma_min > 0 and math.isfinite(self.sigma_min)):
            raise ConfigError(f"sigma_min must be positive, got {self.sigma_min}")
        if not (self.sigma_max >= self.sigma_min and math.isfinite(self.sigma_max)):
            raise ConfigError(
                f"sigma_max ({self.sigma_max}) must be >= sigma_min ({self.sigma_min})"
            )
        if not self.horizon_T > 0:
            raise ConfigError("horizon_T must be positive")

    @property
    def frozen(self) -> bool:
        return self.sigma_max == self.sigma_min

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    @classmethod
    def frozen_at(cls, sigma_min: float, horizon_T: float = 1.0) -> "VeSdeSpec":
        return cls(sigma_min, sigma_min, horizon_T)


def _check_time(spec: VeSdeSpec, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > spec.horizon_T):
        raise DomainError(f"t must lie in [0, {spec.horizon_T}]")
    return t


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def _as_col(t, x: np.ndarray):
    """Broadcast per-row times against a batch of vectors."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    if t.shape != x.shape[: t.ndim]:
        raise ShapeError(f"time shape {t.shape} does not match batch shape {x.shape}")
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


def noise_scale(spec: VeSdeSpec, t):
    t = _check_time(spec, t)
    s = t / spec.horizon_T
    # sigma_min**(1-s) * sigma_max**s is exact at both endpoints
    return _scalar_or_array(spec.sigma_min ** (1.0 - s) * spec.sigma_max**s)


def marginal_variance(spec: VeSdeSpec, t):
    t = _check_time(spec, t)
    s = t / spec.horizon_T
    return _scalar_or_array(spec.sigma_min**2 * np.expm1(2.0 * s * spec.log_ratio))


def marginal_std(spec: VeSdeSpec, t):
    return _scalar_or_array(np.sqrt(marginal_variance(spec, t)))


def instantaneous_diffusion(spec: VeSdeSpec, t):
    """g(t) with g(t)^2 = d/dt sigma(t)^2."""
    sig = noise_scale(spec, t)
    return _scalar_or_array(sig * math.sqrt(2.0 * spec.log_ratio / spec.horizon_T))


def transition_sample(spec: VeSdeSpec, x0, t, seed) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    std = _as_col(marginal_std(spec, t), x0)
    if spec.frozen:
        return x0.copy()
    z = as_generator(seed, "transition").standard_normal(x0.shape)
    return x0 + std * z


def transition_score(spec: VeSdeSpec, x0, x_t, t) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x0.shape != x_t.shape:
        raise ShapeError(f"x0 {x0.shape} and x_t {x_t.shape} differ in shape")
    var = np.asarray(marginal_variance(spec, t))
    if np.any(var <= 0):
        raise SingularKernelError("transition kernel has zero variance at this t")
    return -(x_t - x0) / _as_col(var, x_t)


@dataclass(frozen=True)
class SdeBlock:
    name: str
    dim: int
    spec: VeSdeSpec


@dataclass(frozen=True)
class MultiBlockSdeSpec:
    """Ordered blocks, each diffusing under its own VE spec.

    Random draws for a block come from a sub-stream keyed by the block *name*,
    so reordering blocks (and coordinates accordingly) commutes with sampling.
    """

    blocks: tuple[SdeBlock, ...]

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("at least one block is required")
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ConfigError(f"block names must be unique: {names}")
        for b in self.blocks:
            if b.dim < 1:
                raise ConfigError(f"block {b.name!r} has dim {b.dim}")
        horizons = {b.spec.horizon_T for b in self.blocks}
        if len(horizons) != 1:
            raise ConfigError("all blocks must share horizon_T")

    @classmethod
    def two_block(cls, n_x: int, x_spec: VeSdeSpec, n_y: int, y_spec: VeSdeSpec):
        return cls((SdeBlock("x", n_x, x_spec), SdeBlock("y", n_y, y_spec)))

    @classmethod
    def single(cls, n_x: int, spec: VeSdeSpec):
        return cls((SdeBlock("x", n_x, spec),))

    @property
    def total_dim(self) -> int:
        return sum(b.dim for b in self.blocks)

    @property
    def horizon_T(self) -> float:
        return self.blocks[0].spec.horizon_T

    def slices(self) -> Iterator[tuple[SdeBlock, slice]]:
        start = 0
        for b in self.blocks:
            yield b, slice(start, start + b.dim)
            start += b.dim

    def block(self, name: str) -> SdeBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def block_slice(self, name: str) -> slice:
        for b, sl in self.slices():
            if b.name == name:
                return sl
        raise KeyError(name)

    def check_dim(self, z: np.ndarray) -> None:
        if z.shape[-1] != self.total_dim:
            raise ShapeError(f"expected last dim {self.total_dim}, got {z.shape[-1]}")

    def permuted(self, order: Sequence[int]) -> "MultiBlockSdeSpec":
        return MultiBlockSdeSpec(tuple(self.blocks[i] for i in order))


@dataclass(frozen=True)
class TransitionMoments:
    mean: np.ndarray
    std_per_block: tuple[float, ...]


def transition_moments(mspec: MultiBlockSdeSpec, z0, t) -> TransitionMoments:
    z0 = np.asarray(z0, dtype=np.float64)
    mspec.check_dim(z0)
    return TransitionMoments(z0.copy(), tuple(float(marginal_std(b.spec, t)) for b in mspec.blocks))


def joint_transition_sample(mspec: MultiBlockSdeSpec, z0, t, seed: int) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    mspec.check_dim(z0)
    out = np.empty_like(z0)
    for b, sl in mspec.slices():
        out[..., sl] = transition_sample(b.spec, z0[..., sl], t, stream(seed, "block:" + b.name))
    return out


def prior_sample(mspec: MultiBlockSdeSpec, seed: int, n: int | None = None) -> np.ndarray:
    """Draw from N(0, sigma_max^2 I) per block; ``n`` rows if given."""
    shape = () if n is None else (n,)
    out = np.empty(shape + (mspec.total_dim,))
    for b, sl in mspec.slices():
        rng = stream(seed, "prior:" + b.name)
        out[..., sl] = b.spec.sigma_max * rng.standard_normal(shape + (b.dim,))
    return out
