"""Vector analogs of inpainting, downscaling and linear inverse problems.

A :class:`ForwardOperator` maps a clean vector ``x`` to an observation ``y``.
Randomness inside an operator (mask placement, observation noise) comes from
the per-observation seed, which datasets derive from their master seed and
the row index so every stored pair can be re-created.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import _binfmt
from ._rng import child_seed, stream
from .errors import ConfigError, ShapeError
from .oracles import GaussianSpec, GmmSpec, JointGaussianSpec


class OperatorKind(str, Enum):
    MASK = "mask"
    POOL = "pool"
    LINEAR = "linear"


@dataclass(frozen=True)
class ForwardOperator:
    kind: OperatorKind
    n_x: int
    mask_fraction: float = 0.25
    pool_k: int = 2
    matrix: np.ndarray | None = None
    noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", OperatorKind(self.kind))
        if self.n_x < 1:
            raise ConfigError("n_x must be positive")
        if self.kind is OperatorKind.MASK and not 0 < self.mask_fraction <= 1:
            raise ConfigError("mask_fraction must lie in (0, 1]")
        if self.kind is OperatorKind.POOL and (self.pool_k < 1 or self.n_x % self.pool_k):
            raise ConfigError(f"pool size {self.pool_k} must divide n_x={self.n_x}")
        if self.kind is OperatorKind.LINEAR:
            if self.matrix is None:
                raise ConfigError("LINEAR operator needs a matrix")
            m = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
            if m.shape[1] != self.n_x:
                raise ConfigError(f"matrix shape {m.shape} must be (n_y, {self.n_x})")
            object.__setattr__(self, "matrix", m)
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    @property
    def n_y(self) -> int:
        if self.kind is OperatorKind.MASK:
            return self.n_x
        if self.kind is OperatorKind.POOL:
            return self.n_x // self.pool_k
        return self.matrix.shape[0]

    @property
    def n_masked(self) -> int:
        return math.ceil(self.mask_fraction * self.n_x)

    def linear_map(self) -> np.ndarray:
        """The matrix of a deterministic linear operator (POOL or LINEAR)."""
        if self.kind is OperatorKind.LINEAR:
            return self.matrix
        if self.kind is OperatorKind.POOL:
            return np.kron(np.eye(self.n_y), np.full((1, self.pool_k), 1.0 / self.pool_k))
        raise ConfigError("MASK has no fixed matrix; its placement is random")

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "n_x": self.n_x, "noise_std": self.noise_std}
        if self.kind is OperatorKind.MASK:
            d["mask_fraction"] = self.mask_fraction
        elif self.kind is OperatorKind.POOL:
            d["pool_k"] = self.pool_k
        else:
            d["matrix"] = self.matrix.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ForwardOperator":
        d = dict(d)
        if "matrix" in d:
            d["matrix"] = np.array(d["matrix"], dtype=np.float64)
        return cls(**d)


def mask_offset(op: ForwardOperator, seed) -> int:
    return int(stream(seed, "mask").integers(0, op.n_x - op.n_masked + 1))


def apply_operator(op: ForwardOperator, x, seed, add_noise: bool = True) -> np.ndarray:
    """Observation of one vector ``x``; deterministic given ``(op, x, seed)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (op.n_x,):
        raise ConfigError(f"x must have shape ({op.n_x},), got {x.shape}")
    if op.kind is OperatorKind.MASK:
        y = x.copy()
        start = mask_offset(op, seed)
        y[start : start + op.n_masked] = 0.0
    else:
        y = op.linear_map() @ x
    if add_noise and op.noise_std > 0:
        y = y + op.noise_std * stream(seed, "obs-noise").standard_normal(y.shape)
    return y


def observation_seed(seed: int, index: int) -> int:
    return child_seed(seed, "observation", index)


def apply_operator_rows(op: ForwardOperator, X: np.ndarray, seeds, add_noise: bool = True) -> np.ndarray:
    """Row-wise :func:`apply_operator` with one seed per row."""
    X = np.asarray(X, dtype=np.float64)
    if op.kind is not OperatorKind.MASK and not (add_noise and op.noise_std > 0):
        return X @ op.linear_map().T
    return np.stack([apply_operator(op, x, s, add_noise) for x, s in zip(X, seeds)])


# --------------------------------------------------------- base distributions


def base_to_dict(base: GaussianSpec | GmmSpec) -> dict:
    if isinstance(base, GaussianSpec):
        return {"kind": "gaussian", "mean": base.mean.tolist(), "cov": base.cov.tolist()}
    return {
        "kind": "gmm",
        "weights": base.weights.tolist(),
        "components": [{"mean": c.mean.tolist(), "cov": c.cov.tolist()} for c in base.components],
    }


def base_from_dict(d: dict) -> GaussianSpec | GmmSpec:
    if d["kind"] == "gaussian":
        return GaussianSpec(np.array(d["mean"]), np.array(d["cov"]))
    if d["kind"] == "gmm":
        comps = tuple(GaussianSpec(np.array(c["mean"]), np.array(c["cov"])) for c in d["components"])
        return GmmSpec(np.array(d["weights"]), comps)
    raise ConfigError(f"unknown base distribution kind {d['kind']!r}")


def linear_joint(base: GaussianSpec, op: ForwardOperator) -> JointGaussianSpec:
    """Joint Gaussian of (x, y) for a Gaussian base and a linear operator with Gaussian noise."""
    if not isinstance(base, GaussianSpec):
        raise ConfigError("the joint is Gaussian only for a Gaussian base")
    A = op.linear_map()
    sxx = base.cov
    sxy = sxx @ A.T
    syy = A @ sxx @ A.T + op.noise_std**2 * np.eye(A.shape[0])
    cov = np.block([[sxx, sxy], [sxy.T, syy]])
    mean = np.concatenate([base.mean, A @ base.mean])
    return JointGaussianSpec(GaussianSpec(mean, 0.5 * (cov + cov.T)), base.dim, A.shape[0])


# -------------------------------------------------------------- datasets


@dataclass
class TaskDataset:
    x: np.ndarray
    y: np.ndarray
    base: GaussianSpec | GmmSpec
    op: ForwardOperator
    seed: int

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ShapeError("x and y row counts differ")

    def __len__(self) -> int:
        return self.x.shape[0]

    def observation_seeds(self, rows=None) -> list[int]:
        rows = range(len(self)) if rows is None else rows
        return [observation_seed(self.seed, int(i)) for i in rows]


def make_dataset(base: GaussianSpec | GmmSpec, op: ForwardOperator, n: int, seed: int) -> TaskDataset:
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    if base.dim != op.n_x:
        raise ShapeError(f"base dim {base.dim} differs from operator n_x {op.n_x}")
    x = base.sample(stream(seed, "base"), n)
    seeds = [observation_seed(seed, i) for i in range(n)]
    y = apply_operator_rows(op, x, seeds)
    return TaskDataset(x, y, base, op, int(seed))


def dataset_bytes(ds: TaskDataset) -> bytes:
    header = {"base": base_to_dict(ds.base), "operator": ds.op.to_dict(), "seed": ds.seed, "n": len(ds)}
    return _binfmt.dump_bytes("dataset", header, {"x": ds.x, "y": ds.y})


def dataset_from_bytes(data: bytes) -> TaskDataset:
    header, arrays = _binfmt.load_bytes("dataset", data)
    return TaskDataset(
        arrays["x"], arrays["y"], base_from_dict(header["base"]), ForwardOperator.from_dict(header["operator"]),
        header["seed"],
    )


def save_dataset(path, ds: TaskDataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> TaskDataset:
    return dataset_from_bytes(Path(path).read_bytes())
