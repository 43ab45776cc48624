import numpy as np
import pytest

from condscore.errors import ConfigError, NumericError, ShapeError
from condscore.network import (
    Checkpoint,
    MlpSpec,
    OptimizerState,
    adam_step,
    batch_loss,
    bias_mask,
    checkpoint_bytes,
    checkpoint_from_bytes,
    ema_update,
    finite_diff_grad,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    time_features,
    unpack,
)
from condscore.objectives import ObjectiveConfig, TrainingBatch, input_dim, make_training_batch, output_dim
from condscore.oracles import conditional_score_given_clean_y, joint_conditional
from condscore.sde import MultiBlockSdeSpec, VeSdeSpec, joint_transition_sample

from conftest import two_block


def grad_instance(kind, seed, batch=8, precondition=True, weighting="mle"):
    rng = np.random.default_rng(seed)
    specs = {
        "dsm": MultiBlockSdeSpec.single(3, VeSdeSpec(0.01, 10.0)),
        "cde": two_block((0.01, 10.0), (0.01, 0.01), 3, 2),
        "cdiffe": two_block((0.01, 10.0), (0.01, 10.0), 3, 2),
        "cmde": two_block((0.01, 10.0), (0.01, 1.0), 3, 2),
    }
    mspec = specs[kind]
    obj = ObjectiveConfig(kind, weighting, precondition=precondition)
    widths = tuple(int(w) for w in rng.integers(4, 17, size=rng.integers(1, 4)))
    spec = MlpSpec(input_dim(obj, mspec), output_dim(obj, mspec), widths, int(rng.integers(0, 5)))
    params = init_params(spec, seed)
    params[bias_mask(spec)] = 0.1 * rng.standard_normal(bias_mask(spec).sum())
    x = rng.standard_normal((batch, 3))
    y = None if kind == "dsm" else rng.standard_normal((batch, 2))
    data = make_training_batch(obj, mspec, x, y, seed)
    return spec, params, data, obj, mspec, rng


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


@pytest.mark.parametrize("kind", ["dsm", "cde", "cdiffe", "cmde"])
@pytest.mark.parametrize("precondition", [True, False])
def test_gradient_matches_finite_differences(kind, precondition):
    for seed in range(3):
        spec, params, data, obj, mspec, rng = grad_instance(kind, seed, precondition=precondition,
                                                            weighting="unit" if seed == 2 else "mle")
        loss, grad = loss_and_grad(params, spec, data, obj, mspec)
        assert loss >= 0
        assert loss == pytest.approx(batch_loss(params, spec, data, obj, mspec), rel=1e-12)
        coords = rng.choice(spec.n_params, size=min(50, spec.n_params), replace=False)
        fd = finite_diff_grad(params, spec, data, obj, mspec, coords, h=1e-5)
        assert np.max(rel_err(grad[coords], fd)) < 1e-4
        fd4 = finite_diff_grad(params, spec, data, obj, mspec, coords, h=1e-4)
        assert np.max(rel_err(grad[coords], fd4)) < 1e-4


def test_finite_diff_on_quadratic():
    # a bias-only net with zero input and zero target has loss b^2 / 2
    spec = MlpSpec(1, 1, (), 0)
    mspec = MultiBlockSdeSpec.single(1, VeSdeSpec(0.01, 1.0))
    obj = ObjectiveConfig("dsm", "unit", precondition=False)
    data = TrainingBatch(np.array([0.5]), np.zeros((1, 1)), np.zeros((1, 1)))
    params = np.array([0.0, 3.0])
    fd = finite_diff_grad(params, spec, data, obj, mspec, [1], h=1e-5)
    assert 2 * fd[0] == pytest.approx(6.0, abs=1e-6)
    with pytest.raises(ValueError):
        finite_diff_grad(params, spec, data, obj, mspec, [0], h=0.0)


def test_init_params():
    spec = MlpSpec(4, 3, (256, 256), 8)
    a, b = init_params(spec, 5), init_params(spec, 5)
    assert np.array_equal(a, b)
    assert np.all(a[bias_mask(spec)] == 0)
    W, _ = unpack(spec, a)[1]
    assert abs(W.var() / (2.0 / 256) - 1) < 0.2
    with pytest.raises(ConfigError):
        MlpSpec(4, 3, (16, 0))


def test_forward_examples():
    rng = np.random.default_rng(0)
    spec = MlpSpec(5, 3, (7, 6), 4)
    assert np.all(forward(np.zeros(spec.n_params), spec, rng.standard_normal((4, 5)), 0.3) == 0)
    lin = MlpSpec(5, 3, (), 2)
    p = rng.standard_normal(lin.n_params)
    (W, b), = unpack(lin, p)
    x = rng.standard_normal(5)
    feats = np.concatenate([x, time_features(0.7, 2, 1)[0]])
    assert np.allclose(forward(p, lin, x, 0.7), W @ feats + b, rtol=1e-14)
    for _ in range(5):
        widths = tuple(rng.integers(1, 9, size=rng.integers(0, 4)))
        s = MlpSpec(int(rng.integers(1, 6)), int(rng.integers(1, 6)), widths)
        out = forward(init_params(s, 1), s, rng.standard_normal((3, s.input_dim)), 0.1)
        assert out.shape == (3, s.output_dim)
    with pytest.raises(ShapeError):
        forward(p, lin, np.zeros(4), 0.5)
    with pytest.raises(NumericError):
        forward(p, lin, np.array([np.nan, 0, 0, 0, 0]), 0.5)


def test_affine_net_at_exact_score_is_near_minimal(bivariate08):
    """A linear net holding the exact conditional score is a local minimum of the CDE loss."""
    j = bivariate08
    mspec = MultiBlockSdeSpec.two_block(1, VeSdeSpec(0.01, 2.0), 1, VeSdeSpec.frozen_at(0.01))
    obj = ObjectiveConfig("cde", "unit", precondition=False)
    spec = MlpSpec(2, 1, (), 0)
    t = 0.6
    # exact score is affine in (x_t, y): read its coefficients off three evaluations
    s0 = conditional_score_given_clean_y(j, mspec, t, np.zeros(1), np.zeros(1))[0]
    a = conditional_score_given_clean_y(j, mspec, t, np.ones(1), np.zeros(1))[0] - s0
    c = conditional_score_given_clean_y(j, mspec, t, np.zeros(1), np.ones(1))[0] - s0
    params = np.array([a, c, s0])
    n = 200_000
    z0 = j.gauss.sample(1, n)
    noised = joint_transition_sample(mspec, z0, np.full(n, t), 2)
    batch = TrainingBatch(np.full(n, t), z0, noised)
    base = batch_loss(params, spec, batch, obj, mspec)
    _, grad = loss_and_grad(params, spec, batch, obj, mspec)
    assert np.linalg.norm(grad) < 0.05
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = rng.standard_normal(3)
        assert batch_loss(params + 0.1 * d / np.linalg.norm(d), spec, batch, obj, mspec) > base


def test_adam_examples():
    p = np.array([1.0])
    st = OptimizerState.create(p, lr=1e-3)
    st2, p2 = adam_step(st, p, np.zeros(1))
    assert np.array_equal(p2, p) and st2.step == 1
    _, p3 = adam_step(st, p, np.ones(1))
    assert p3[0] == pytest.approx(1.0 - 1e-3, rel=1e-8)
    with pytest.raises(NumericError):
        adam_step(st, p, np.array([np.inf]))
    with pytest.raises(ShapeError):
        adam_step(st, p, np.ones(2))


def test_adam_trajectory_deterministic():
    def run():
        spec, params, data, obj, mspec, _ = grad_instance("cmde", 4, batch=16)
        st = OptimizerState.create(params)
        for _ in range(20):
            _, g = loss_and_grad(params, spec, data, obj, mspec)
            st, params = adam_step(st, params, g)
            st = ema_update(st, params)
        return params, st.ema
    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_ema_examples():
    p = np.array([2.0, -1.0])
    st = OptimizerState.create(p)
    assert np.array_equal(ema_update(st, p).ema, p)
    st = OptimizerState(np.zeros(1), np.zeros(1), np.zeros(1), ema_rate=0.999)
    assert ema_update(st, np.ones(1)).ema[0] == pytest.approx(0.001, abs=1e-15)
    gap0 = 1.0
    for k in range(1, 200):
        st = ema_update(st, np.ones(1))
        assert abs(1.0 - st.ema[0]) == pytest.approx(0.999**k * gap0, rel=1e-9)
    with pytest.raises(ConfigError):
        OptimizerState.create(p, ema_rate=1.0)


def test_checkpoint_round_trip(tmp_path):
    spec = MlpSpec(3, 2, (5, 4), 3)
    params = init_params(spec, 7)
    st = OptimizerState.create(params, lr=3e-4)
    st, params = adam_step(st, params, np.random.default_rng(0).standard_normal(params.size))
    st = ema_update(st, params)
    ck = Checkpoint(spec, params, st, 12345, {"note": "x"})
    raw = checkpoint_bytes(ck)
    back = checkpoint_from_bytes(raw)
    assert checkpoint_bytes(back) == raw
    assert back.spec == spec and back.state.step == 1 and back.master_seed == 12345
    assert np.array_equal(back.state.v, st.v)
    save_checkpoint(tmp_path / "c.ckpt", ck)
    assert (tmp_path / "c.ckpt").read_bytes() == raw
    assert checkpoint_bytes(load_checkpoint(tmp_path / "c.ckpt")) == raw
    assert raw.startswith(b"CONDSCORE checkpoint 1\n")
