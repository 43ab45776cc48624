"""Command line: ``condscore <subcommand> [options]``.

``train``, ``sample`` and ``evaluate`` run the stages of an experiment one at a
time and hand over through files in ``--out``; ``run`` does all three.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build_mspec, dump_config, load_config
from .errors import CondScoreError
from .experiment import (
    check_shapes,
    checkpoint_of,
    evaluate,
    fmt,
    make_datasets,
    reconstruct,
    run_experiment,
    samples_bytes,
    samples_from_bytes,
    source_from_params,
    theorem3_csv,
    train,
    write_report,
    MetricsReport,
)
from .network import load_checkpoint, save_checkpoint
from .oracles import JointGaussianSpec, theorem3_error_curve
from .schedules import VsSchedule, vs_sigma_max
from .sde import MultiBlockSdeSpec, VeSdeSpec
from .tasks import load_dataset, save_dataset

log = logging.getLogger("condscore")


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, estimator=args.estimator, sigma_y_max=args.sigma_y_max)


def _stage_config(args) -> ExperimentConfig:
    """Config of an earlier stage in ``--out``, unless ``--config`` names another."""
    if args.config is None:
        args.config = str(Path(args.out) / "config.yaml")
    return _experiment_config(args)


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    train_data, held_out = make_datasets(cfg)
    save_dataset(out / "train.dataset", train_data)
    save_dataset(out / "eval.dataset", held_out)
    result = train(cfg, train_data)
    save_checkpoint(out / "checkpoint.ckpt", checkpoint_of(cfg, result))
    print(f"trained {cfg.optimizer.n_steps} steps; final loss {fmt(float(result.losses[-1]))}")
    return 0


def cmd_sample(args) -> int:
    cfg = _stage_config(args)
    out = Path(args.out)
    held_out = load_dataset(out / "eval.dataset")
    ckpt = load_checkpoint(out / "checkpoint.ckpt")
    params = ckpt.state.ema if cfg.sampler.use_ema else ckpt.params
    n_y = held_out.y.shape[1]
    source = source_from_params(cfg, params, ckpt.spec, n_y)
    recs = reconstruct(cfg, source, build_mspec(cfg, n_y), held_out.y)
    (out / "samples.bin").write_bytes(samples_bytes(recs, {"estimator": cfg.estimator, "seed": cfg.seed}))
    print(f"wrote {recs.shape[0]} x {recs.shape[1]} reconstructions")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _stage_config(args)
    out = Path(args.out)
    held_out = load_dataset(out / "eval.dataset")
    recs, _ = samples_from_bytes((out / "samples.bin").read_bytes())
    check_shapes(recs, held_out)
    report = MetricsReport([evaluate(cfg, held_out, recs)])
    write_report(out, report)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    arts = run_experiment(cfg, args.out)
    sys.stdout.write(arts.report.to_csv())
    return 0


def cmd_theorem3(args) -> int:
    j = JointGaussianSpec.bivariate(args.rho)
    x_spec = VeSdeSpec(args.sigma_min, args.sigma_max)
    template = MultiBlockSdeSpec.two_block(1, x_spec, 1, VeSdeSpec.frozen_at(args.sigma_min))
    grid = args.grid if args.grid else [args.sigma_min, 0.1, 0.5, 1.0, 5.0, 50.0]
    seed = 0 if args.seed is None else args.seed
    points = theorem3_error_curve(j, template, args.t, np.array([args.x_t]), np.array([args.y]),
                                  sorted(grid), args.n_mc, seed)
    text = theorem3_csv(points)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "theorem3.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_schedule(args) -> int:
    s = VsSchedule(args.M, args.sigma_max_initial, args.sigma_max_target)
    steps = args.iterations if args.iterations else np.linspace(0, args.M, args.points).round().astype(int)
    lines = ["n,sigma_max"] + [f"{int(n)},{fmt(vs_sigma_max(s, int(n)))}" for n in steps]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "schedule.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def _add_common(p: argparse.ArgumentParser, out_default: str | None = "out") -> None:
    p.add_argument("--config", help="YAML/JSON experiment config")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--estimator", choices=["dse", "dsm", "cde", "cdiffe", "cmde", "vs-cmde"])
    p.add_argument("--sigma-y-max", type=float, dest="sigma_y_max")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condscore", description="Conditional score-based diffusion lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_text in (
        ("train", cmd_train, "build datasets and train a score network"),
        ("sample", cmd_sample, "draw reconstructions from a trained checkpoint"),
        ("evaluate", cmd_evaluate, "score reconstructions and write metrics.csv"),
        ("run", cmd_run, "train, sample and evaluate"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("theorem3-curve", help="MC error of the diffused-condition score versus sigma_y_max")
    _add_common(p, out_default=None)
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--x-t", type=float, default=0.5, dest="x_t")
    p.add_argument("--y", type=float, default=1.0)
    p.add_argument("--sigma-min", type=float, default=0.01, dest="sigma_min")
    p.add_argument("--sigma-max", type=float, default=10.0, dest="sigma_max")
    p.add_argument("--grid", type=float, nargs="+")
    p.add_argument("--n-mc", type=int, default=100_000, dest="n_mc")
    p.set_defaults(func=cmd_theorem3)

    p = sub.add_parser("schedule", help="print the VS-CMDE sigma_max schedule")
    _add_common(p, out_default=None)
    p.add_argument("--sigma-max-initial", type=float, default=50.0, dest="sigma_max_initial")
    p.add_argument("--sigma-max-target", type=float, default=1.0, dest="sigma_max_target")
    p.add_argument("--M", type=int, default=125_000)
    p.add_argument("--points", type=int, default=11)
    p.add_argument("--iterations", type=int, nargs="+")
    p.set_defaults(func=cmd_schedule)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CondScoreError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
