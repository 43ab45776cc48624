"""Reconstruction quality, consistency, diversity and Gaussian Frechet distance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .oracles import GaussianSpec, sym_sqrt
from .tasks import ForwardOperator, apply_operator_rows

PSNR_CAP = 200.0
REG = 1e-9


def fit_gaussian(samples) -> GaussianSpec:
    """Sample mean and unbiased, symmetrized sample covariance."""
    samples = np.asarray(samples, dtype=np.float64)
    n, d = samples.shape
    if n <= d:
        raise ShapeError(f"need more samples ({n}) than dimensions ({d})")
    mean = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov).min() <= 0:
        warnings.warn("rank-deficient sample covariance; adding 1e-9 I", RuntimeWarning, stacklevel=2)
        cov = cov + REG * np.eye(d)
    return GaussianSpec(mean, cov)


def _frechet_one_way(a: GaussianSpec, b: GaussianSpec) -> float:
    sa = sym_sqrt(a.cov)
    cross = sym_sqrt(sa @ b.cov @ sa)
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))


def frechet_gaussian(a: GaussianSpec, b: GaussianSpec) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    if a.dim != b.dim:
        raise ShapeError("Gaussians differ in dimension")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    # averaging both orders makes the result exactly symmetric
    d = 0.5 * (_frechet_one_way(a, b) + _frechet_one_way(b, a))
    return max(d, 0.0)


def psnr(mse, data_range: float):
    mse = np.asarray(mse, dtype=np.float64)
    with np.errstate(divide="ignore"):
        val = 10.0 * np.log10(data_range**2 / mse)
    return np.minimum(val, PSNR_CAP)


@dataclass(frozen=True)
class ReconstructionRecord:
    mse: float
    psnr: float
    psnr_stderr: float
    psnr_mean_over_k: float
    consistency_psnr: float
    consistency_stderr: float
    diversity: float
    diversity_stderr: float
    psnr_capped: bool


def _stderr(v: np.ndarray) -> float:
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def diversity_per_observation(recs: np.ndarray) -> np.ndarray:
    """Mean over coordinates of the across-reconstruction sample std, per observation."""
    # shifting by the first reconstruction makes identical sets exactly zero
    return (recs - recs[:, :1]).std(axis=1, ddof=1).mean(axis=-1)


def reconstruction_metrics(x_true, recs, y, op: ForwardOperator, op_seeds, data_range: float) -> ReconstructionRecord:
    """Scores ``k`` reconstructions per observation.

    ``x_true``: (n, d); ``recs``: (n, k, d); ``y``: (n, n_y).  PSNR values are
    computed per observation from the first reconstruction and averaged.
    Consistency compares the noiseless observation of that reconstruction with y.
    """
    x_true = np.asarray(x_true, dtype=np.float64)
    recs = np.asarray(recs, dtype=np.float64)
    n, k, d = recs.shape
    if x_true.shape != (n, d):
        raise ShapeError("x_true and reconstructions disagree in shape")
    if k < 2:
        raise ShapeError("diversity needs at least two reconstructions")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    first = recs[:, 0]
    mse_obs = np.mean((first - x_true) ** 2, axis=1)
    psnr_obs = psnr(mse_obs, data_range)
    psnr_k = psnr(np.mean((recs - x_true[:, None]) ** 2, axis=2), data_range).mean(axis=1)
    y_hat = apply_operator_rows(op, first, op_seeds, add_noise=False)
    cons_obs = psnr(np.mean((y_hat - np.asarray(y)) ** 2, axis=1), data_range)
    div_obs = diversity_per_observation(recs)
    return ReconstructionRecord(
        mse=float(mse_obs.mean()),
        psnr=float(psnr_obs.mean()),
        psnr_stderr=_stderr(psnr_obs),
        psnr_mean_over_k=float(psnr_k.mean()),
        consistency_psnr=float(cons_obs.mean()),
        consistency_stderr=_stderr(cons_obs),
        diversity=float(div_obs.mean()),
        diversity_stderr=_stderr(div_obs),
        psnr_capped=bool(np.any(psnr_obs >= PSNR_CAP) or np.any(cons_obs >= PSNR_CAP)),
    )
