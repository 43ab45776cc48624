"""Training-time distributions over t and the decaying condition-noise schedule."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ._rng import as_generator
from .errors import ConfigError, DomainError
from .sde import EPS_TIME, VeSdeSpec


class TimeModeKind(str, Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"


@dataclass(frozen=True)
class TimeMode:
    mode: TimeModeKind = TimeModeKind.CONTINUOUS
    N: int = 1000
    eps: float = EPS_TIME
    T: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", TimeModeKind(self.mode))
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if not self.eps < self.T:
            raise ConfigError("eps must be below T")

    def grid(self) -> np.ndarray:
        """The discrete grid {eps, T/N, 2T/N, ..., T}."""
        g = np.arange(self.N + 1, dtype=np.float64) * (self.T / self.N)
        g[0] = self.eps
        return g


def draw_time(mode: TimeMode, seed, size=None):
    rng = as_generator(seed, "time")
    if mode.mode is TimeModeKind.CONTINUOUS:
        return rng.uniform(mode.eps, mode.T, size=size)
    idx = rng.integers(0, mode.N + 1, size=size)
    return mode.grid()[idx]


@dataclass(frozen=True)
class VsSchedule:
    """sigma_max of the condition's diffusion, decaying over M training iterations."""

    M: int
    sigma_max_initial: float
    sigma_max_target: float

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if not 0 < self.sigma_max_target <= self.sigma_max_initial:
            raise ConfigError("need 0 < sigma_max_target <= sigma_max_initial")


def vs_sigma_max(s: VsSchedule, n: int) -> float:
    """Inverse-multiplicative decay from ``sigma_max_initial`` (n=0) to the target (n=M).

    Iterations past M stay at the target.
    """
    if n < 0:
        raise DomainError("iteration must be >= 0")
    if n >= s.M:
        return float(s.sigma_max_target)
    if n == 0:
        return float(s.sigma_max_initial)
    smax, tgt, M = s.sigma_max_initial, s.sigma_max_target, s.M
    return M * tgt * smax / (n * (smax - tgt) + M * tgt)


def vs_y_spec(s: VsSchedule, n: int, sigma_min: float, horizon_T: float = 1.0) -> VeSdeSpec:
    smax = vs_sigma_max(s, n)
    if not smax > sigma_min:
        raise ConfigError(f"scheduled sigma_max {smax} must exceed sigma_min {sigma_min}")
    return VeSdeSpec(sigma_min, smax, horizon_T)
