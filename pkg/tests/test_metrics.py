import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condscore.errors import ShapeError
from condscore.metrics import (
    PSNR_CAP,
    diversity_per_observation,
    fit_gaussian,
    frechet_gaussian,
    psnr,
    reconstruction_metrics,
)
from condscore.oracles import GaussianSpec
from condscore.tasks import ForwardOperator, apply_operator, observation_seed


def g1(mu, var):
    return GaussianSpec(np.array([mu]), np.array([[var]]))


def test_fit_gaussian_examples():
    with pytest.warns(RuntimeWarning):
        g = fit_gaussian(np.ones((10, 2)))
    assert np.all(np.abs(g.cov) <= 1e-9 + 1e-15)
    x = np.random.default_rng(0).standard_normal((100_000, 2))
    g = fit_gaussian(x)
    assert np.max(np.abs(g.mean)) < 0.02 and np.max(np.abs(g.cov - np.eye(2))) < 0.02
    with pytest.raises(ShapeError):
        fit_gaussian(np.zeros((2, 2)))


def test_fit_gaussian_mean_unbiased():
    rng = np.random.default_rng(1)
    means = np.array([fit_gaussian(rng.normal(1.5, 2.0, size=(50, 1))).mean[0] for _ in range(100)])
    se = 2.0 / np.sqrt(50 * 100)
    assert abs(means.mean() - 1.5) < 4 * se


def test_frechet_examples():
    assert frechet_gaussian(g1(0, 1), g1(0, 1)) == 0.0
    assert frechet_gaussian(g1(0, 1), g1(3, 1)) == pytest.approx(9.0, rel=1e-12)
    assert frechet_gaussian(g1(0, 1), g1(0, 4)) == pytest.approx(1.0, rel=1e-12)


def spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_frechet_properties(seed, d):
    rng = np.random.default_rng(seed)
    a = GaussianSpec(rng.standard_normal(d), spd(rng, d))
    b = GaussianSpec(rng.standard_normal(d), spd(rng, d))
    ab, ba = frechet_gaussian(a, b), frechet_gaussian(b, a)
    assert ab == ba and ab > 0
    assert frechet_gaussian(a, a) == 0.0
    da, db = rng.uniform(0.1, 3, d), rng.uniform(0.1, 3, d)
    ma, mb = rng.standard_normal(d), rng.standard_normal(d)
    exact = np.sum((ma - mb) ** 2) + np.sum((np.sqrt(da) - np.sqrt(db)) ** 2)
    got = frechet_gaussian(GaussianSpec(ma, np.diag(da)), GaussianSpec(mb, np.diag(db)))
    assert got == pytest.approx(exact, rel=1e-9, abs=1e-12)


def test_psnr_examples():
    assert psnr(0.01, 1.0) == pytest.approx(20.0, rel=1e-12)
    assert psnr(0.0, 1.0) == PSNR_CAP


def test_diversity_examples():
    recs = np.zeros((1, 2, 3))
    recs[0, 1, 0] = 2.0
    assert diversity_per_observation(recs)[0] == pytest.approx(np.sqrt(2) / 3)
    one = np.array([[[0.0], [2.0]]])
    assert diversity_per_observation(one)[0] == pytest.approx(1.4142, abs=1e-4)
    rng = np.random.default_rng(2)
    r = rng.standard_normal((5, 4, 3))
    assert np.allclose(diversity_per_observation(-2.5 * r), 2.5 * diversity_per_observation(r), rtol=1e-14)
    same = np.repeat(r[:, :1], 4, axis=1)
    assert np.all(diversity_per_observation(same) == 0)


def test_reconstruction_metrics_perfect():
    op = ForwardOperator("mask", 4)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 4))
    seeds = [observation_seed(1, i) for i in range(6)]
    y = np.stack([apply_operator(op, xi, s) for xi, s in zip(x, seeds)])
    recs = np.repeat(x[:, None], 3, axis=1)
    r = reconstruction_metrics(x, recs, y, op, seeds, 4.0)
    assert r.psnr == PSNR_CAP and r.consistency_psnr == PSNR_CAP and r.diversity == 0.0 and r.psnr_capped
    with pytest.raises(ShapeError):
        reconstruction_metrics(x, recs[:, :1], y, op, seeds, 4.0)
    with pytest.raises(ValueError):
        reconstruction_metrics(x, recs, y, op, seeds, 0.0)


def test_reconstruction_metrics_values():
    op = ForwardOperator("pool", 2, pool_k=2)
    x = np.array([[0.0, 0.0]])
    recs = np.array([[[0.1, 0.1], [0.3, -0.1]]])
    y = np.array([[0.0]])
    r = reconstruction_metrics(x, recs, y, op, [0], 1.0)
    assert r.mse == pytest.approx(0.01)
    assert r.psnr == pytest.approx(20.0)
    assert r.consistency_psnr == pytest.approx(20.0)
    assert r.diversity == pytest.approx(np.mean([np.std([0.1, 0.3], ddof=1), np.std([0.1, -0.1], ddof=1)]))
