"""Closed-form ground truth for Gaussian and Gaussian-mixture targets.

Under a VE diffusion a Gaussian ``N(mu, Sigma)`` becomes ``N(mu, Sigma + v(t) I)``
and a mixture stays a mixture of the diffused components, so every score used
by the samplers and tests has an exact expression here.  Times are scalars;
points may be a single vector or a batch of rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from ._rng import as_generator
from .errors import ConfigError, NumericError, RankError, ShapeError, SingularKernelError
from .sde import MultiBlockSdeSpec, VeSdeSpec, marginal_variance, transition_score

EIG_FLOOR = 1e-12


def _sym_eig(a: np.ndarray):
    w, q = np.linalg.eigh(0.5 * (a + a.T))
    return np.maximum(w, EIG_FLOOR), q


def sym_inv(a: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via eigendecomposition."""
    w, q = _sym_eig(a)
    return (q / w) @ q.T


def sym_sqrt(a: np.ndarray) -> np.ndarray:
    w, q = np.linalg.eigh(0.5 * (a + a.T))
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


@dataclass(frozen=True)
class GaussianSpec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ShapeError(f"covariance {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise ConfigError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ConfigError("covariance is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, seed, n: int) -> np.ndarray:
        rng = as_generator(seed, "gaussian")
        L = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, self.dim)) @ L.T

    def diffused(self, v: float) -> "GaussianSpec":
        return GaussianSpec(self.mean, self.cov + v * np.eye(self.dim))

    def log_density(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=np.float64)
        L = np.linalg.cholesky(self.cov)
        diff = np.atleast_2d(point - self.mean)
        sol = np.linalg.solve(L, diff.T).T
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        out = -0.5 * (np.sum(sol * sol, axis=1) + logdet + self.dim * np.log(2 * np.pi))
        return out[0] if point.ndim == 1 else out


@dataclass(frozen=True)
class JointGaussianSpec:
    """Gaussian over z = (x, y) with the split n_x + n_y."""

    gauss: GaussianSpec
    n_x: int
    n_y: int

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1 or self.n_x + self.n_y != self.gauss.dim:
            raise ShapeError("block split inconsistent with the joint dimension")

    @classmethod
    def bivariate(cls, rho: float) -> "JointGaussianSpec":
        return cls(GaussianSpec(np.zeros(2), np.array([[1.0, rho], [rho, 1.0]])), 1, 1)

    def blocks(self):
        nx = self.n_x
        mu, S = self.gauss.mean, self.gauss.cov
        return mu[:nx], mu[nx:], S[:nx, :nx], S[:nx, nx:], S[nx:, nx:]

    def x_marginal(self) -> GaussianSpec:
        mx, _, sxx, _, _ = self.blocks()
        return GaussianSpec(mx, sxx)


@dataclass(frozen=True)
class GmmSpec:
    weights: np.ndarray
    components: tuple[GaussianSpec, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(self.components) < 1 or w.shape != (len(self.components),):
            raise ConfigError("need one positive weight per component")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if len({c.dim for c in self.components}) != 1:
            raise ConfigError("components differ in dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", tuple(self.components))

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[float, GaussianSpec]]) -> "GmmSpec":
        return cls(np.array([w for w, _ in pairs]), tuple(g for _, g in pairs))

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def sample(self, seed, n: int) -> np.ndarray:
        rng = as_generator(seed, "gmm")
        labels = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k, comp in enumerate(self.components):
            idx = labels == k
            out[idx] = comp.mean + z[idx] @ np.linalg.cholesky(comp.cov).T
        return out

    def mean(self) -> np.ndarray:
        return sum(w * c.mean for w, c in zip(self.weights, self.components))

    def cov(self) -> np.ndarray:
        mu = self.mean()
        return sum(
            w * (c.cov + np.outer(c.mean - mu, c.mean - mu)) for w, c in zip(self.weights, self.components)
        )


def _check_scalar_time(t):
    if np.ndim(t) != 0:
        raise ShapeError("analytic oracles take a scalar time")
    return float(t)


def gaussian_diffused_score(g: GaussianSpec, spec: VeSdeSpec, t, point) -> np.ndarray:
    v = marginal_variance(spec, _check_scalar_time(t))
    prec = sym_inv(g.cov + v * np.eye(g.dim))
    point = np.asarray(point, dtype=np.float64)
    return -(point - g.mean) @ prec


def gmm_log_density(m: GmmSpec, spec: VeSdeSpec, t, point) -> np.ndarray:
    v = marginal_variance(spec, _check_scalar_time(t))
    point = np.asarray(point, dtype=np.float64)
    logs = np.stack(
        [np.log(w) + c.diffused(v).log_density(np.atleast_2d(point)) for w, c in zip(m.weights, m.components)],
        axis=-1,
    )
    out = logsumexp(logs, axis=-1)
    return out[0] if point.ndim == 1 else out


def gmm_diffused_score(m: GmmSpec, spec: VeSdeSpec, t, point) -> np.ndarray:
    """Responsibility-weighted sum of the diffused component scores."""
    if len(m.components) == 1:
        return gaussian_diffused_score(m.components[0], spec, t, point)
    v = marginal_variance(spec, _check_scalar_time(t))
    point = np.asarray(point, dtype=np.float64)
    pts = np.atleast_2d(point)
    logs, scores = [], []
    for w, c in zip(m.weights, m.components):
        dc = c.diffused(v)
        logs.append(np.log(w) + dc.log_density(pts))
        scores.append(-(pts - c.mean) @ sym_inv(dc.cov))
    logs = np.stack(logs, axis=-1)
    resp = np.exp(logs - logsumexp(logs, axis=-1, keepdims=True))
    out = np.einsum("bk,kbd->bd", resp, np.stack(scores))
    return out[0] if point.ndim == 1 else out


# --------------------------------------------------- conditional Gaussians


def joint_conditional(j: JointGaussianSpec, y) -> GaussianSpec:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (j.n_y,):
        raise ShapeError(f"y must have shape ({j.n_y},)")
    mx, my, sxx, sxy, syy = j.blocks()
    if np.linalg.eigvalsh(syy).min() <= EIG_FLOOR:
        raise NumericError("singular y covariance")
    gain = sxy @ sym_inv(syy)
    cov = sxx - gain @ sxy.T
    return GaussianSpec(mx + gain @ (y - my), 0.5 * (cov + cov.T))


def _diffused_conditional(j: JointGaussianSpec, v_x: float, v_y: float):
    """Gain and precision of x_t | y_t when the blocks carry kernel variances v_x, v_y."""
    mx, my, sxx, sxy, syy = j.blocks()
    gain = sxy @ sym_inv(syy + v_y * np.eye(j.n_y))
    cov = sxx - gain @ sxy.T + v_x * np.eye(j.n_x)
    return gain, sym_inv(cov)


def _conditional_score(j: JointGaussianSpec, v_x: float, v_y: float, x_t, y_cond):
    mx, my = j.gauss.mean[: j.n_x], j.gauss.mean[j.n_x :]
    gain, prec = _diffused_conditional(j, v_x, v_y)
    x_t = np.asarray(x_t, dtype=np.float64)
    y_cond = np.asarray(y_cond, dtype=np.float64)
    if x_t.shape[-1] != j.n_x or y_cond.shape[-1] != j.n_y:
        raise ShapeError("x_t / y dimensions do not match the joint split")
    cond_mean = mx + (y_cond - my) @ gain.T
    return -(x_t - cond_mean) @ prec


def _block_variances(mspec: MultiBlockSdeSpec, t) -> tuple[float, float]:
    t = _check_scalar_time(t)
    return (marginal_variance(mspec.block("x").spec, t), marginal_variance(mspec.block("y").spec, t))


def conditional_score_given_clean_y(j: JointGaussianSpec, mspec: MultiBlockSdeSpec, t, x_t, y):
    """Score of p(x_t | y): condition on clean y, then diffuse x."""
    v_x, _ = _block_variances(mspec, t)
    return _conditional_score(j, v_x, 0.0, x_t, y)


def conditional_score_given_diffused_y(j: JointGaussianSpec, mspec: MultiBlockSdeSpec, t, x_t, y_t):
    """x-block of the joint diffused score, i.e. the score of p(x_t | y_t)."""
    v_x, v_y = _block_variances(mspec, t)
    return _conditional_score(j, v_x, v_y, x_t, y_t)


def joint_diffused_score(j: JointGaussianSpec, mspec: MultiBlockSdeSpec, t, z) -> np.ndarray:
    """Full score of p(x_t, y_t) with blockwise kernel variances."""
    v_x, v_y = _block_variances(mspec, t)
    cov = j.gauss.cov + np.diag(np.r_[np.full(j.n_x, v_x), np.full(j.n_y, v_y)])
    return -(np.asarray(z, dtype=np.float64) - j.gauss.mean) @ sym_inv(cov)


def joint_diffused_log_density(j: JointGaussianSpec, mspec: MultiBlockSdeSpec, t, z):
    v_x, v_y = _block_variances(mspec, t)
    cov = j.gauss.cov + np.diag(np.r_[np.full(j.n_x, v_x), np.full(j.n_y, v_y)])
    return GaussianSpec(j.gauss.mean, cov).log_density(z)


# ---------------------------------------------------- approximation error


@dataclass(frozen=True)
class CurvePoint:
    sigma_y_max: float
    mse: float
    mc_stderr: float


def theorem3_error_curve(j: JointGaussianSpec, mspec_template: MultiBlockSdeSpec, t, x_t, y,
                         sigma_y_max_grid: Sequence[float], n_mc: int, seed) -> list[CurvePoint]:
    """Monte-Carlo estimate of E_{y_t ~ p(y_t|y)} |score(x_t|y_t) - score(x_t|y)|^2.

    The y block of ``mspec_template`` supplies sigma_min; each grid entry sets
    its sigma_max.  All grid entries reuse one set of normal draws, so adjacent
    estimates are positively correlated and their ordering is sharp.
    """
    grid = [float(s) for s in sigma_y_max_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ConfigError("grid must be ascending")
    x_spec = mspec_template.block("x").spec
    y_block = mspec_template.block("y")
    x_t = np.asarray(x_t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = as_generator(seed, "theorem3").standard_normal((n_mc, y_block.dim))
    reference = conditional_score_given_clean_y(j, mspec_template, t, x_t, y)
    out = []
    for smax in grid:
        y_spec = VeSdeSpec(y_block.spec.sigma_min, smax, y_block.spec.horizon_T)
        mspec = MultiBlockSdeSpec.two_block(j.n_x, x_spec, y_block.dim, y_spec)
        if y_spec.frozen:
            y_t = np.broadcast_to(y, z.shape)
        else:
            y_t = y + np.sqrt(marginal_variance(y_spec, t)) * z
        gap = conditional_score_given_diffused_y(j, mspec, t, x_t, y_t) - reference
        sq = np.sum(gap * gap, axis=-1)
        out.append(CurvePoint(smax, float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(n_mc))))
    return out


# ------------------------------------------------------------ affine fits


class AffineTarget(str, Enum):
    CDE_TARGET = "cde_target"
    TRUE_CONDITIONAL_TARGET = "true_conditional_target"


@dataclass(frozen=True)
class AffineFitData:
    """Samples at a fixed time t: clean x0, diffused x_t, clean condition y."""

    t: float
    x0: np.ndarray
    x_t: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class AffineScore:
    """s(x_t, y) = A @ (x_t, y) + b."""

    A: np.ndarray
    b: np.ndarray

    def coefficients(self) -> np.ndarray:
        return np.concatenate([self.A, self.b[:, None]], axis=1)

    def __call__(self, x_t, y):
        return np.concatenate([x_t, y], axis=-1) @ self.A.T + self.b


def make_affine_fit_data(j: JointGaussianSpec, x_spec: VeSdeSpec, t: float, n: int, seed) -> AffineFitData:
    rng = as_generator(seed, "affine-fit")
    z0 = j.gauss.sample(rng, n)
    x0, y = z0[:, : j.n_x], z0[:, j.n_x :]
    x_t = x0 + np.sqrt(marginal_variance(x_spec, t)) * rng.standard_normal(x0.shape)
    return AffineFitData(float(t), x0, x_t, y)


def fit_affine_score_targets(features: np.ndarray, targets: np.ndarray) -> AffineScore:
    """Exact least squares of ``targets`` on ``[features, 1]`` via the normal equations."""
    X = np.concatenate([features, np.ones((features.shape[0], 1))], axis=1)
    gram = X.T @ X
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise RankError("normal equations are singular")
    beta = np.linalg.solve(gram, X.T @ targets)
    return AffineScore(beta[:-1].T.copy(), beta[-1].copy())


def fit_affine_score(data: AffineFitData, loss_kind: AffineTarget, x_spec: VeSdeSpec,
                     joint: JointGaussianSpec | None = None) -> AffineScore:
    """Minimize the CDE objective, or the true-conditional objective, over affine scores."""
    loss_kind = AffineTarget(loss_kind)
    if loss_kind is AffineTarget.CDE_TARGET:
        targets = transition_score(x_spec, data.x0, data.x_t, data.t)
    else:
        if joint is None:
            raise ConfigError("the true-conditional target needs the joint distribution")
        mspec = MultiBlockSdeSpec.two_block(joint.n_x, x_spec, joint.n_y, VeSdeSpec.frozen_at(x_spec.sigma_min))
        targets = conditional_score_given_clean_y(joint, mspec, data.t, data.x_t, data.y)
    return fit_affine_score_targets(np.concatenate([data.x_t, data.y], axis=1), targets)


def population_affine_fit(j: JointGaussianSpec, x_spec: VeSdeSpec, t: float,
                          loss_kind: AffineTarget) -> AffineScore:
    """Infinite-data affine minimizer, from exact second moments of (x_t, y, x0)."""
    loss_kind = AffineTarget(loss_kind)
    v = marginal_variance(x_spec, _check_scalar_time(t))
    if not v > 0:
        raise SingularKernelError("kernel variance is zero at this t")
    mx, my, sxx, sxy, syy = j.blocks()
    nx, ny = j.n_x, j.n_y
    # w = (x_t, y, 1); second moments E[w w^T] and cross moments with x0
    mean_w = np.concatenate([mx, my, [1.0]])
    cov_w = np.zeros((nx + ny + 1, nx + ny + 1))
    cov_w[:nx, :nx] = sxx + v * np.eye(nx)
    cov_w[:nx, nx : nx + ny] = sxy
    cov_w[nx : nx + ny, :nx] = sxy.T
    cov_w[nx : nx + ny, nx : nx + ny] = syy
    m_ww = cov_w + np.outer(mean_w, mean_w)
    m_wxt = m_ww[:, :nx]
    m_wy = m_ww[:, nx : nx + ny]
    if loss_kind is AffineTarget.CDE_TARGET:
        cov_wx0 = np.concatenate([sxx, sxy.T, np.zeros((1, nx))], axis=0)
        m_wx0 = cov_wx0 + np.outer(mean_w, mx)
        cross = -(m_wxt - m_wx0) / v
    else:
        gain, prec = _diffused_conditional(j, v, 0.0)
        centred = m_wxt - np.outer(mean_w, mx) - (m_wy - np.outer(mean_w, my)) @ gain.T
        cross = -centred @ prec
    beta = np.linalg.solve(m_ww, cross)
    return AffineScore(beta[:-1].T.copy(), beta[-1].copy())
