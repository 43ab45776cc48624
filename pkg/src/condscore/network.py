"""Dense score network with hand-written backprop, Adam and EMA.

The network maps ``(input, t)`` to a score estimate.  Time enters through
sinusoidal features ``sin(2^k pi t), cos(2^k pi t)`` for ``k < time_features``
concatenated to the input; hidden layers use SiLU, the output layer is linear.
Parameters live in one flat float64 vector; :func:`unpack` returns views.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import _binfmt
from ._rng import as_generator
from .errors import ConfigError, NumericError, ShapeError
from .objectives import (
    ObjectiveConfig,
    TrainingBatch,
    input_scale,
    model_input,
    output_scale,
    per_sample_loss,
    weighted_residuals,
)
from .sde import MultiBlockSdeSpec


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_widths: tuple[int, ...] = (128, 128, 128)
    time_features: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError("input_dim and output_dim must be positive")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigError(f"zero-width layer in {self.hidden_widths}")
        if self.time_features < 0:
            raise ConfigError("time_features must be >= 0")

    @property
    def feature_dim(self) -> int:
        return self.input_dim + 2 * self.time_features

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) per layer."""
        dims = [self.feature_dim, *self.hidden_widths, self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())


def unpack(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    if params.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got {params.shape}")
    layers = []
    off = 0
    for fan_out, fan_in in spec.layer_shapes():
        W = params[off : off + fan_out * fan_in].reshape(fan_out, fan_in)
        off += fan_out * fan_in
        b = params[off : off + fan_out]
        off += fan_out
        layers.append((W, b))
    return layers


def bias_mask(spec: MlpSpec) -> np.ndarray:
    mask = np.zeros(spec.n_params, dtype=bool)
    off = 0
    for fan_out, fan_in in spec.layer_shapes():
        off += fan_out * fan_in
        mask[off : off + fan_out] = True
        off += fan_out
    return mask


def init_params(spec: MlpSpec, seed) -> np.ndarray:
    """He-style init: weights N(0, 2/fan_in), biases zero."""
    rng = as_generator(seed, "init")
    params = np.zeros(spec.n_params)
    for W, _ in unpack(spec, params):
        W[...] = rng.standard_normal(W.shape) * np.sqrt(2.0 / W.shape[1])
    return params


def time_features(t, n: int, batch: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    if n == 0:
        return np.empty((batch, 0))
    freqs = np.pi * 2.0 ** np.arange(n)
    arg = t[:, None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _features(spec: MlpSpec, inp, t) -> np.ndarray:
    inp = np.asarray(inp, dtype=np.float64)
    if inp.ndim != 2 or inp.shape[1] != spec.input_dim:
        raise ShapeError(f"input shape {inp.shape} incompatible with input_dim {spec.input_dim}")
    if not np.all(np.isfinite(inp)):
        raise NumericError("non-finite network input")
    return np.concatenate([inp, time_features(t, spec.time_features, inp.shape[0])], axis=1)


def _forward_cached(spec: MlpSpec, params: np.ndarray, inp, t):
    layers = unpack(spec, params)
    h = _features(spec, inp, t)
    cache = []
    for W, b in layers[:-1]:
        a = h @ W.T + b
        s = expit(a)
        cache.append((h, a, s))
        h = a * s
    W, b = layers[-1]
    cache.append((h, None, None))
    return h @ W.T + b, cache


def forward(params: np.ndarray, spec: MlpSpec, inp, t) -> np.ndarray:
    """Evaluate the network; a 1-D ``inp`` gives a 1-D output."""
    inp = np.asarray(inp, dtype=np.float64)
    single = inp.ndim == 1
    out, _ = _forward_cached(spec, params, np.atleast_2d(inp), t)
    return out[0] if single else out


def _backward(spec: MlpSpec, params: np.ndarray, cache, d_out: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(params)
    layers = unpack(spec, params)
    glayers = unpack(spec, grad)
    delta = d_out
    for i in range(len(layers) - 1, -1, -1):
        h_in, _, _ = cache[i]
        W, _ = layers[i]
        gW, gb = glayers[i]
        gW[...] = delta.T @ h_in
        gb[...] = delta.sum(axis=0)
        if i == 0:
            break
        _, a, s = cache[i - 1]
        # d/da [a * sigmoid(a)] = s * (1 + a * (1 - s))
        delta = (delta @ W) * (s * (1.0 + a * (1.0 - s)))
    return grad


def score_output(params, spec: MlpSpec, cfg: ObjectiveConfig, mspec: MultiBlockSdeSpec, noised, t):
    """Score estimate over the output blocks, with the configured preconditioning."""
    noised = np.atleast_2d(np.asarray(noised, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), noised.shape[:1])
    inp = model_input(cfg, mspec, noised) * input_scale(cfg, mspec, t)
    raw, _ = _forward_cached(spec, params, inp, t)
    return raw * output_scale(cfg, mspec, t)


def loss_and_grad(params, spec: MlpSpec, batch: TrainingBatch, objective: ObjectiveConfig,
                  mspec: MultiBlockSdeSpec) -> tuple[float, np.ndarray]:
    if len(batch) == 0:
        raise ShapeError("empty batch")
    t = batch.t
    inp = model_input(objective, mspec, batch.noised) * input_scale(objective, mspec, t)
    raw, cache = _forward_cached(spec, params, inp, t)
    o_scale = output_scale(objective, mspec, t)
    out = raw * o_scale
    n = len(batch)
    d_out = np.zeros_like(out)
    total = 0.0
    for osl, v, w in weighted_residuals(objective, mspec, t, batch.clean, batch.noised, out):
        total = total + np.sum(w * v * v, axis=-1)
        d_out[:, osl] = -w * v / n
    loss = float(np.mean(0.5 * total))
    grad = _backward(spec, params, cache, d_out * o_scale)
    return loss, grad


def batch_loss(params, spec: MlpSpec, batch: TrainingBatch, objective: ObjectiveConfig,
               mspec: MultiBlockSdeSpec) -> float:
    out = score_output(params, spec, objective, mspec, batch.noised, batch.t)
    return float(np.mean(per_sample_loss(objective, mspec, batch.t, batch.clean, batch.noised, out)))


def finite_diff_grad(params, spec, batch, objective, mspec, coords, h: float = 1e-5) -> np.ndarray:
    """Central differences of the batch loss along the requested coordinates."""
    if not h > 0:
        raise ValueError("h must be positive")
    out = np.empty(len(coords))
    work = np.array(params, dtype=np.float64, copy=True)
    for k, i in enumerate(coords):
        orig = work[i]
        work[i] = orig + h
        up = batch_loss(work, spec, batch, objective, mspec)
        work[i] = orig - h
        down = batch_loss(work, spec, batch, objective, mspec)
        work[i] = orig
        out[k] = (up - down) / (2 * h)
    return out


# -------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    ema: np.ndarray
    step: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    ema_rate: float = 0.999

    def __post_init__(self):
        if not 0 < self.ema_rate < 1:
            raise ConfigError("ema_rate must lie in (0, 1)")
        if self.step < 0:
            raise ConfigError("step must be >= 0")

    @classmethod
    def create(cls, params: np.ndarray, **hyper) -> "OptimizerState":
        return cls(np.zeros_like(params), np.zeros_like(params), np.array(params, copy=True), **hyper)

    def hyperparameters(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps_adam", "ema_rate")}


def adam_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray):
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ShapeError("parameter, gradient and moment shapes disagree")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient; Adam step refused")
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_adam)
    return replace(state, m=m, v=v, step=step), new_params


def ema_update(state: OptimizerState, params: np.ndarray) -> OptimizerState:
    if params.shape != state.ema.shape:
        raise ShapeError("EMA and parameter shapes disagree")
    return replace(state, ema=state.ema_rate * state.ema + (1 - state.ema_rate) * params)


# ------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    spec: MlpSpec
    params: np.ndarray
    state: OptimizerState
    master_seed: int
    extra: dict = field(default_factory=dict)


def _checkpoint_parts(ckpt: Checkpoint):
    header = {
        "architecture": asdict(ckpt.spec),
        "optimizer": ckpt.state.hyperparameters(),
        "step": ckpt.state.step,
        "master_seed": ckpt.master_seed,
        "extra": ckpt.extra,
    }
    arrays = {"params": ckpt.params, "ema": ckpt.state.ema, "adam_m": ckpt.state.m, "adam_v": ckpt.state.v}
    return header, arrays


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    return _binfmt.dump_bytes("checkpoint", *_checkpoint_parts(ckpt))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    header, arrays = _binfmt.load_bytes("checkpoint", data)
    arch = header["architecture"]
    spec = MlpSpec(arch["input_dim"], arch["output_dim"], tuple(arch["hidden_widths"]), arch["time_features"])
    state = OptimizerState(arrays["adam_m"], arrays["adam_v"], arrays["ema"], step=header["step"], **header["optimizer"])
    return Checkpoint(spec, arrays["params"], state, header["master_seed"], header["extra"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
