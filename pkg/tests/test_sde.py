import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condscore.errors import ConfigError, DomainError, ShapeError, SingularKernelError
from condscore.sde import (
    MultiBlockSdeSpec,
    SdeBlock,
    VeSdeSpec,
    instantaneous_diffusion,
    joint_transition_sample,
    marginal_std,
    marginal_variance,
    noise_scale,
    prior_sample,
    transition_moments,
    transition_sample,
    transition_score,
)

specs = st.builds(
    lambda lo, ratio, T: VeSdeSpec(lo, lo * ratio, T),
    st.floats(1e-3, 1.0),
    st.floats(1.5, 1e4),
    st.floats(0.5, 3.0),
)


def test_noise_scale_examples(spec50):
    assert noise_scale(spec50, 0.0) == 0.01
    assert noise_scale(spec50, 1.0) == 50.0
    independent = math.exp(math.log(0.01) + 0.5 * math.log(5000.0))
    assert noise_scale(spec50, 0.5) == pytest.approx(0.7071068, abs=1e-7)
    assert noise_scale(spec50, 0.5) == pytest.approx(independent, rel=1e-14)


def test_marginal_variance_examples(spec50):
    assert marginal_variance(spec50, 0.0) == 0.0
    assert marginal_variance(spec50, 1.0) == pytest.approx(2499.9999, rel=1e-12)
    assert marginal_std(spec50, 1.0) == pytest.approx(math.sqrt(2499.9999), rel=1e-12)


def test_instantaneous_diffusion_example(spec50):
    assert instantaneous_diffusion(spec50, 0.0) == pytest.approx(0.01 * math.sqrt(2 * math.log(5000)), rel=1e-12)
    assert instantaneous_diffusion(spec50, 0.0) == pytest.approx(0.0412727, abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(specs)
def test_diffusion_matches_variance_derivative(spec):
    ts = np.linspace(0.01, 0.99, 100) * spec.horizon_T
    h = 1e-6 * spec.horizon_T
    fd = (marginal_variance(spec, ts + h) - marginal_variance(spec, ts - h)) / (2 * h)
    g2 = instantaneous_diffusion(spec, ts) ** 2
    assert np.max(np.abs(g2 - fd) / g2) < 1e-5


@settings(max_examples=30, deadline=None)
@given(specs)
def test_endpoints_exact_and_monotone(spec):
    T = spec.horizon_T
    assert noise_scale(spec, 0.0) == spec.sigma_min
    assert noise_scale(spec, T) == spec.sigma_max
    assert marginal_variance(spec, 0.0) == 0.0
    ts = np.linspace(0, T, 200)
    assert np.all(np.diff(marginal_variance(spec, ts)) > 0)
    assert np.all(np.diff(instantaneous_diffusion(spec, ts)) > 0)


def test_domain_errors(spec50):
    for bad in (-0.1, 1.1, float("nan")):
        with pytest.raises(DomainError):
            noise_scale(spec50, bad)
    with pytest.raises(ConfigError):
        VeSdeSpec(0.0, 1.0)
    with pytest.raises(ConfigError):
        VeSdeSpec(1.0, 0.5)


def test_frozen_spec_has_zero_variance():
    s = VeSdeSpec.frozen_at(0.01)
    assert s.frozen
    assert marginal_variance(s, 1.0) == 0.0
    assert instantaneous_diffusion(s, 0.7) == 0.0


def test_transition_sample_properties(spec50):
    x0 = np.array([1.0, -2.0])
    assert np.array_equal(transition_sample(spec50, x0, 0.0, 3), x0)
    a = transition_sample(spec50, x0, 0.3, 3)
    assert np.array_equal(a, transition_sample(spec50, x0, 0.3, 3))
    spec = VeSdeSpec(0.01, 2.0)
    n = 100_000
    draws = transition_sample(spec, np.full(n, 0.5), 0.6, 11)
    var = marginal_variance(spec, 0.6)
    assert abs(draws.mean() - 0.5) < 4 * math.sqrt(var / n)
    assert abs(draws.var() / var - 1) < 0.05


def test_transition_score_examples():
    spec = VeSdeSpec(0.01, 10.0)
    assert np.all(transition_score(spec, np.ones(3), np.ones(3), 0.4) == 0)
    # a time where the kernel variance is exactly 4 is found by inverting sigma(t)^2
    t = math.log(math.sqrt(4 + 1e-4) / 0.01) / math.log(1000.0)
    assert marginal_variance(spec, t) == pytest.approx(4.0, rel=1e-12)
    assert transition_score(spec, np.array([1.0]), np.array([2.0]), t)[0] == pytest.approx(-0.25, rel=1e-10)
    with pytest.raises(SingularKernelError):
        transition_score(spec, np.ones(1), np.ones(1), 0.0)
    with pytest.raises(ShapeError):
        transition_score(spec, np.ones(2), np.ones(3), 0.5)


@settings(max_examples=40, deadline=None)
@given(specs, st.floats(0.05, 1.0), st.floats(-5, 5), st.floats(-5, 5))
def test_transition_score_matches_log_density(spec, frac, x0, xt):
    t = frac * spec.horizon_T
    var = marginal_variance(spec, t)

    def logp(x):
        return -0.5 * (x - x0) ** 2 / var - 0.5 * math.log(2 * math.pi * var)

    s = transition_score(spec, np.array([x0]), np.array([xt]), t)[0]
    assert s == pytest.approx(-(xt - x0) / var, rel=1e-10, abs=1e-300)
    h = 1e-4 * math.sqrt(var)
    fd = (logp(xt + h) - logp(xt - h)) / (2 * h)
    assert abs(s - fd) <= 1e-6 * max(abs(s), 1e-3 / math.sqrt(var))


def test_multiblock_validation():
    s = VeSdeSpec(0.01, 1.0)
    with pytest.raises(ConfigError):
        MultiBlockSdeSpec(())
    with pytest.raises(ConfigError):
        MultiBlockSdeSpec((SdeBlock("x", 1, s), SdeBlock("y", 1, VeSdeSpec(0.01, 1.0, 2.0))))
    with pytest.raises(ConfigError):
        MultiBlockSdeSpec((SdeBlock("x", 0, s),))
    m = MultiBlockSdeSpec.two_block(3, s, 2, s)
    assert m.total_dim == 5
    with pytest.raises(ShapeError):
        joint_transition_sample(m, np.zeros(4), 0.5, 0)


def test_joint_transition_examples():
    n = 100_000
    m = MultiBlockSdeSpec.two_block(1, VeSdeSpec(0.01, 50.0), 1, VeSdeSpec(0.01, 1.0))
    z = joint_transition_sample(m, np.zeros((n, 2)), 1.0, 5)
    assert abs(z[:, 0].std() / 50.0 - 1) < 0.05
    assert abs(z[:, 1].std() / 1.0 - 1) < 0.05
    eq = MultiBlockSdeSpec.two_block(1, VeSdeSpec(0.01, 5.0), 1, VeSdeSpec(0.01, 5.0))
    z = joint_transition_sample(eq, np.zeros((n, 2)), 0.7, 6)
    assert abs(z[:, 0].var() / z[:, 1].var() - 1) < 0.03
    frozen = MultiBlockSdeSpec.two_block(2, VeSdeSpec(0.01, 5.0), 2, VeSdeSpec.frozen_at(0.01))
    z0 = np.arange(4.0)
    z = joint_transition_sample(frozen, z0, 0.9, 7)
    assert np.array_equal(z[2:], z0[2:])
    mom = transition_moments(frozen, z0, 0.0)
    assert mom.std_per_block == (0.0, 0.0)


def test_block_permutation_commutes():
    m = MultiBlockSdeSpec.two_block(2, VeSdeSpec(0.01, 5.0), 3, VeSdeSpec(0.01, 1.0))
    z0 = np.random.default_rng(0).standard_normal((7, 5))
    t = np.linspace(0.1, 0.9, 7)
    a = joint_transition_sample(m, z0, t, 42)
    p = m.permuted([1, 0])
    b = joint_transition_sample(p, np.concatenate([z0[:, 2:], z0[:, :2]], axis=1), t, 42)
    assert np.array_equal(a, np.concatenate([b[:, 3:], b[:, :3]], axis=1))


def test_prior_sample_moments():
    m = MultiBlockSdeSpec.two_block(1, VeSdeSpec(0.01, 50.0), 1, VeSdeSpec(0.01, 2.0))
    n = 100_000
    z = prior_sample(m, 9, n)
    assert abs(z[:, 0].std() / 50 - 1) < 0.05 and abs(z[:, 1].std() / 2 - 1) < 0.05
    assert abs(z[:, 0].mean()) < 4 * 50 / math.sqrt(n)
    assert abs(z[:, 1].mean()) < 4 * 2 / math.sqrt(n)
    assert np.array_equal(prior_sample(m, 9, 10), z[:10])
