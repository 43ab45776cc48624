"""End-to-end runs: dataset, training, reconstruction, metrics and the files they produce.

Every random quantity derives from ``cfg.seed`` through named sub-streams, so a
config plus seed pins down each number in the output CSV.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import _binfmt
from ._rng import child_seed, stream
from .config import (
    ExperimentConfig,
    build_base,
    build_mspec,
    build_network_spec,
    build_objective,
    build_operator,
    build_sampler_config,
    build_vs_schedule,
    dump_config,
    estimator_kind,
    x_spec,
    y_sigma_max,
)
from .errors import ConfigError, NumericError, ShapeError
from .metrics import fit_gaussian, frechet_gaussian, reconstruction_metrics
from .network import (
    Checkpoint,
    MlpSpec,
    OptimizerState,
    adam_step,
    ema_update,
    init_params,
    loss_and_grad,
    save_checkpoint,
)
from .objectives import EstimatorKind, ObjectiveConfig, make_training_batch
from .oracles import GaussianSpec, JointGaussianSpec, conditional_score_given_clean_y
from .samplers import ScoreSource, network_source, sample_conditional, sample_unconditional
from .schedules import vs_y_spec
from .sde import MultiBlockSdeSpec, VeSdeSpec
from .tasks import ForwardOperator, OperatorKind, TaskDataset, make_dataset, save_dataset

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "task", "estimator", "sigma_y_max", "seed", "psnr", "mse", "consistency_psnr",
    "diversity", "ufid", "jfid", "n_eval", "k",
)
THEOREM3_COLUMNS = ("sigma_y_max", "mse", "mc_stderr")


def fmt(value) -> str:
    """Numbers at 17 significant digits; other values as text."""
    if isinstance(value, (bool, np.bool_)):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


# ---------------------------------------------------------------- datasets


def make_datasets(cfg: ExperimentConfig) -> tuple[TaskDataset, TaskDataset]:
    base, op = build_base(cfg), build_operator(cfg)
    train = make_dataset(base, op, cfg.n_train, child_seed(cfg.seed, "train-data"))
    held_out = make_dataset(base, op, cfg.n_eval, child_seed(cfg.seed, "eval-data"))
    return train, held_out


# ---------------------------------------------------------------- training


class TrainingDiverged(NumericError):
    """Non-finite loss during training; carries the state reached so far."""

    def __init__(self, step: int, loss: float, losses: list[float]):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss
        self.losses = losses

    def diagnostics(self) -> dict:
        finite = [v for v in self.losses if np.isfinite(v)]
        return {
            "status": "diverged",
            "step": self.step,
            "loss": repr(self.loss),
            "last_finite_loss": finite[-1] if finite else None,
            "steps_completed": len(self.losses),
        }


@dataclass
class TrainResult:
    spec: MlpSpec
    params: np.ndarray
    state: OptimizerState
    objective: ObjectiveConfig
    mspec: MultiBlockSdeSpec
    losses: np.ndarray

    def sampling_params(self, use_ema: bool) -> np.ndarray:
        return self.state.ema if use_ema else self.params


def training_mspec(cfg: ExperimentConfig, mspec: MultiBlockSdeSpec, n: int) -> MultiBlockSdeSpec:
    """Block layout at iteration ``n``; only VS-CMDE changes it over time."""
    sched = build_vs_schedule(cfg)
    if sched is None:
        return mspec
    ys = vs_y_spec(sched, n, cfg.sde.sigma_min, cfg.sde.horizon_T)
    return MultiBlockSdeSpec.two_block(mspec.block("x").dim, mspec.block("x").spec, mspec.block("y").dim, ys)


def train(cfg: ExperimentConfig, data: TaskDataset,
          callback: Optional[Callable[[int, np.ndarray, OptimizerState], None]] = None) -> TrainResult:
    """Adam + EMA on minibatches of ``data``.  ``callback(step, params, state)`` runs after each step."""
    objective = build_objective(cfg)
    mspec = build_mspec(cfg, data.y.shape[1])
    spec = build_network_spec(cfg, objective, mspec)
    o = cfg.optimizer
    params = init_params(spec, child_seed(cfg.seed, "init"))
    state = OptimizerState.create(
        params, lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps_adam=o.eps_adam, ema_rate=o.ema_rate
    )
    n = len(data)
    losses = []
    for step in range(o.n_steps):
        rows = stream(cfg.seed, "minibatch", step).integers(0, n, size=o.batch_size)
        mspec_n = training_mspec(cfg, mspec, step)
        batch = make_training_batch(objective, mspec_n, data.x[rows], data.y[rows],
                                    child_seed(cfg.seed, "train-step", step))
        loss, grad = loss_and_grad(params, spec, batch, objective, mspec_n)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDiverged(step, loss, losses)
        losses.append(loss)
        if o.lr_decay == "cosine":
            state = replace(state, lr=0.5 * o.lr * (1 + np.cos(np.pi * step / o.n_steps)))
        state, params = adam_step(state, params, grad)
        state = ema_update(state, params)
        if callback is not None:
            callback(step, params, state)
    return TrainResult(spec, params, state, objective, mspec, np.array(losses))


# ------------------------------------------------------------ sampling


def mask_oracle_source(base: GaussianSpec, op: ForwardOperator, mspec: MultiBlockSdeSpec) -> ScoreSource:
    """Exact CDE score for a noiseless MASK task with a Gaussian base.

    The hidden coordinates are read off as the exact zeros of y; the observed
    ones condition the Gaussian in closed form.
    """
    if op.kind is not OperatorKind.MASK or op.noise_std > 0:
        raise ConfigError("mask oracle needs a noiseless MASK operator")
    nx = op.n_x
    xs = mspec.block("x").spec
    y_frozen = VeSdeSpec.frozen_at(xs.sigma_min, xs.horizon_T)
    cache: dict[tuple, tuple] = {}

    def pieces(observed: tuple):
        if observed not in cache:
            idx = np.flatnonzero(observed)
            A = np.eye(nx)[idx]
            # observed coordinates are exact; a 1e-10 jitter keeps the joint covariance definite
            cov = np.block([[base.cov, base.cov @ A.T], [A @ base.cov, A @ base.cov @ A.T + 1e-10 * np.eye(idx.size)]])
            j = JointGaussianSpec(GaussianSpec(np.concatenate([base.mean, A @ base.mean]), cov), nx, idx.size)
            cache[observed] = (idx, j, MultiBlockSdeSpec.two_block(nx, xs, idx.size, y_frozen))
        return cache[observed]

    def fn(inp, t):
        x, y = inp[:, :nx], inp[:, nx:]
        out = np.empty_like(x)
        patterns = y != 0.0
        for key in {tuple(p) for p in patterns}:
            rows = np.all(patterns == np.array(key), axis=1)
            idx, j, ms = pieces(key)
            out[rows] = conditional_score_given_clean_y(j, ms, t, x[rows], y[rows][:, idx])
        return out

    return ScoreSource(fn, EstimatorKind.CDE, nx, op.n_y)


def reconstruct(cfg: ExperimentConfig, source: ScoreSource, mspec: MultiBlockSdeSpec,
                y: np.ndarray) -> np.ndarray:
    """``k`` reconstructions per observation, shape ``(n, k, n_x)``.

    All chains run as one batch; chain ``i * k + j`` is reconstruction ``j`` of row ``i``.
    """
    k = cfg.k_reconstructions
    n = y.shape[0]
    scfg = build_sampler_config(cfg)
    seed = child_seed(cfg.seed, "sample")
    kind = source.estimator_kind
    if kind is EstimatorKind.DSM:
        flat = sample_unconditional(source, mspec.block("x").spec, scfg, n * k, seed)
    else:
        flat = sample_conditional(source, mspec, np.repeat(y, k, axis=0), scfg, kind, None, seed)
    return flat.reshape(n, k, -1)


def samples_bytes(recs: np.ndarray, meta: dict) -> bytes:
    return _binfmt.dump_bytes("samples", meta, {"reconstructions": recs})


def samples_from_bytes(data: bytes) -> tuple[np.ndarray, dict]:
    header, arrays = _binfmt.load_bytes("samples", data)
    return arrays["reconstructions"], header


# ------------------------------------------------------------- reporting


@dataclass(frozen=True)
class MetricsRow:
    task: str
    estimator: str
    sigma_y_max: float
    seed: int
    psnr: float
    mse: float
    consistency_psnr: float
    diversity: float
    ufid: float
    jfid: float
    n_eval: int
    k: int
    psnr_stderr: float = 0.0
    consistency_stderr: float = 0.0
    diversity_stderr: float = 0.0
    psnr_mean_over_k: float = 0.0
    psnr_capped: bool = False

    def __post_init__(self):
        nums = [self.sigma_y_max, self.psnr, self.mse, self.consistency_psnr, self.diversity, self.ufid, self.jfid]
        if not all(np.isfinite(v) for v in nums):
            raise NumericError(f"non-finite metric in {self}")
        if self.diversity < 0 or self.ufid < 0 or self.jfid < 0:
            raise NumericError("diversity and Frechet distances must be >= 0")


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    metadata: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows], "metadata": self.metadata}, indent=2, sort_keys=True)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def evaluate(cfg: ExperimentConfig, held_out: TaskDataset, recs: np.ndarray) -> MetricsRow:
    rec = reconstruction_metrics(
        held_out.x, recs, held_out.y, held_out.op, held_out.observation_seeds(), cfg.task.data_range
    )
    n, k, d = recs.shape
    flat = recs.reshape(n * k, d)
    ufid = frechet_gaussian(fit_gaussian(held_out.x), fit_gaussian(flat))
    joint_true = np.concatenate([held_out.x, held_out.y], axis=1)
    joint_rec = np.concatenate([flat, np.repeat(held_out.y, k, axis=0)], axis=1)
    jfid = frechet_gaussian(fit_gaussian(joint_true), fit_gaussian(joint_rec))
    return MetricsRow(
        task=cfg.task.kind,
        estimator=cfg.estimator,
        sigma_y_max=float(y_sigma_max(cfg)),
        seed=cfg.seed,
        psnr=rec.psnr,
        mse=rec.mse,
        consistency_psnr=rec.consistency_psnr,
        diversity=rec.diversity,
        ufid=ufid,
        jfid=jfid,
        n_eval=n,
        k=k,
        psnr_stderr=rec.psnr_stderr,
        consistency_stderr=rec.consistency_stderr,
        diversity_stderr=rec.diversity_stderr,
        psnr_mean_over_k=rec.psnr_mean_over_k,
        psnr_capped=rec.psnr_capped,
    )


# ------------------------------------------------------------------ runs


@dataclass
class RunArtifacts:
    report: MetricsReport
    train_result: Optional[TrainResult]
    reconstructions: np.ndarray
    train_data: TaskDataset
    held_out: TaskDataset


def checkpoint_of(cfg: ExperimentConfig, result: TrainResult) -> Checkpoint:
    return Checkpoint(result.spec, result.params, result.state, cfg.seed,
                      {"estimator": cfg.estimator, "config": cfg.model_dump(mode="json")})


def source_from_params(cfg: ExperimentConfig, params: np.ndarray, spec: MlpSpec, n_y: int) -> ScoreSource:
    return network_source(params, spec, build_objective(cfg), build_mspec(cfg, n_y))


def write_report(out: Path, report: MetricsReport) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.json").write_text(report.to_json())


def run_experiment(cfg: ExperimentConfig, out_dir=None, score_source: ScoreSource | None = None) -> RunArtifacts:
    """Dataset, training (skipped when ``score_source`` is given), reconstruction and metrics.

    With ``out_dir`` the config, datasets, checkpoint, reconstructions and
    report are written there.  On divergence a ``diverged.json`` with the
    diagnostics is written before the error propagates.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg))
    train_data, held_out = make_datasets(cfg)
    if out is not None:
        save_dataset(out / "train.dataset", train_data)
        save_dataset(out / "eval.dataset", held_out)
    mspec = build_mspec(cfg, held_out.y.shape[1])
    result = None
    if score_source is None:
        try:
            result = train(cfg, train_data)
        except TrainingDiverged as exc:
            log.error("training diverged: %s", exc)
            if out is not None:
                (out / "diverged.json").write_text(json.dumps(exc.diagnostics(), indent=2))
            raise
        if out is not None:
            save_checkpoint(out / "checkpoint.ckpt", checkpoint_of(cfg, result))
        score_source = network_source(result.sampling_params(cfg.sampler.use_ema), result.spec,
                                      result.objective, mspec)
    elif score_source.estimator_kind is not estimator_kind(cfg):
        raise ConfigError("score source does not match the configured estimator")
    recs = reconstruct(cfg, score_source, mspec, held_out.y)
    if not np.all(np.isfinite(recs)):
        raise NumericError(f"{int((~np.isfinite(recs)).any(axis=2).sum())} reconstruction chain(s) aborted")
    row = evaluate(cfg, held_out, recs)
    meta = {"train_steps": cfg.optimizer.n_steps, "x_sigma_max": x_spec(cfg).sigma_max}
    if result is not None and result.losses.size:
        meta["final_train_loss"] = float(result.losses[-1])
    report = MetricsReport([row], meta)
    if out is not None:
        (out / "samples.bin").write_bytes(samples_bytes(recs, {"estimator": cfg.estimator, "seed": cfg.seed}))
        write_report(out, report)
    return RunArtifacts(report, result, recs, train_data, held_out)


def theorem3_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(THEOREM3_COLUMNS)
    for p in points:
        w.writerow([fmt(p.sigma_y_max), fmt(p.mse), fmt(p.mc_stderr)])
    return buf.getvalue()


def check_shapes(recs: np.ndarray, held_out: TaskDataset) -> None:
    if recs.ndim != 3 or recs.shape[0] != len(held_out) or recs.shape[2] != held_out.x.shape[1]:
        raise ShapeError(f"reconstructions {recs.shape} do not match the held-out set")
