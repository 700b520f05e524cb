"""Command-line entry point.

Subcommands:
  train           one training run, optionally written as JSON
  reproduce-fig2  the optimizer-by-scheme loss-curve grid
  timing          sequential wall-clock comparison of the grid
  eval-scheme     scheme-quality records for a candidate during a run
  speed-check     closed-form step-improvement vs. enumeration oracle
  grad-check      backpropagation vs. finite differences
  verify-theorem  randomized variance-sandwich verification
  fetch-data      verify the packaged digit corpus is present and loadable

Every subcommand honors --seed, --config (an INI file with a [run]
section whose keys are RunConfig field names), --data-dir, and --out.
Verification subcommands print one PASS/FAIL line per check and exit
nonzero when any check fails.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data, experiment, metric, models, speed
from .experiment import RunConfig
from .schemes import gradient_norm_scheme, normalize, uniform

SPEED_CHECK_TOL = 1e-10
GRAD_CHECK_TOL = 1e-4
SANDWICH_SLACK = 1e-9
OPTIMUM_EQUALITY_TOL = 1e-10


def read_config_file(path) -> dict:
    """RunConfig field values from the [run] section of an INI file."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    if "run" not in parser:
        raise ValueError(f"config file {path} has no [run] section")
    section = parser["run"]
    defaults = RunConfig()
    values = {}
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in section:
        if key not in known:
            raise ValueError(f"unknown config key {key!r} in {path}")
        probe = getattr(defaults, key)
        if isinstance(probe, bool):
            values[key] = section.getboolean(key)
        elif isinstance(probe, int):
            values[key] = section.getint(key)
        elif isinstance(probe, float):
            values[key] = section.getfloat(key)
        else:
            values[key] = section.get(key)
    return values


# argparse destination -> RunConfig field for flags shared by the run-driving
# subcommands
_FLAG_FIELDS = {
    "model": "model",
    "dataset": "dataset",
    "optimizer": "optimizer",
    "lr": "lr",
    "momentum": "momentum",
    "alpha": "alpha",
    "beta1": "beta1",
    "beta2": "beta2",
    "eps": "eps",
    "second_moment": "second_moment",
    "scheme": "scheme",
    "steps": "steps",
    "batch_size": "batch_size",
    "repetitions": "repetitions",
    "n_train": "n_train",
    "grad_chunk": "grad_chunk",
    "metric": "metric_enabled",
    "metric_m": "metric_m",
    "metric_every": "metric_every",
    "importance_weight": "apply_importance_weight",
    "accuracy": "eval_final_accuracy",
}


def resolve_run_config(args, **overrides) -> RunConfig:
    """Merge defaults, config file, and explicit flags into a RunConfig.

    Precedence: built-in defaults < config file < command-line flags <
    overrides fixed by the subcommand.
    """
    values = dataclasses.asdict(RunConfig())
    config_path = getattr(args, "config", None)
    if config_path is not None:
        values.update(read_config_file(config_path))
    if getattr(args, "full", False):
        values["steps"] = 300
        values["repetitions"] = 45
    for dest, field in _FLAG_FIELDS.items():
        flag = getattr(args, dest, None)
        if flag is not None:
            values[field] = flag
    if getattr(args, "seed", None) is not None:
        values["base_seed"] = args.seed
    if getattr(args, "data_dir", None) is not None:
        values["data_dir"] = str(args.data_dir)
    values.update(overrides)
    return RunConfig(**values)


def _emit(args, name: str, lines: list[str]) -> None:
    for line in lines:
        print(line)
    out = getattr(args, "out", None)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text("\n".join(lines) + "\n")


def _seed(args) -> int:
    return args.seed if args.seed is not None else 0


# ---- run-driving subcommands ----


def cmd_train(args) -> int:
    config = resolve_run_config(args)
    record = experiment.run_training(config, args.run_index)
    slug = experiment.cell_slug(config.optimizer, config.scheme)
    lines = [
        f"run {slug} index {args.run_index}: {config.steps} steps, "
        f"batch {config.batch_size}, seed {config.base_seed}",
        f"initial loss {record.losses[0]:.6f}",
    ]
    if record.failed:
        lines.append(f"DIVERGED at step {record.failure_step}")
    else:
        lines.append(f"final loss   {record.losses[-1]:.6f}")
    lines.append(f"wall clock   {record.wall_clock:.3f} s")
    lines.append(f"scheme refresh passes {record.grad_table_passes}")
    if record.final_accuracy is not None:
        lines.append(f"accuracy     {record.final_accuracy:.4f}")
    _emit(args, f"train-{slug}-{args.run_index}.txt", lines)
    if args.out is not None:
        path = Path(args.out) / f"run-{slug}-{args.run_index}.json"
        with open(path, "w") as fh:
            json.dump(experiment.run_record_to_dict(record), fh, indent=2)
            fh.write("\n")
        print(f"wrote {path}")
    return 1 if record.failed else 0


def _sweep_kwargs(args) -> dict:
    config = resolve_run_config(args)
    return dict(
        steps=config.steps,
        repetitions=config.repetitions,
        batch_size=config.batch_size,
        lr=config.lr,
        momentum=config.momentum,
        base_seed=config.base_seed,
        dataset=config.dataset,
        model=config.model,
        data_dir=config.data_dir,
        n_train=config.n_train,
        second_moment=config.second_moment,
        metric_enabled=config.metric_enabled,
        metric_m=config.metric_m,
        metric_every=config.metric_every,
        grad_chunk=config.grad_chunk,
    )


def _progress_printer(verbose: bool):
    if not verbose:
        return None

    def show(slug, run_index, record):
        status = f"diverged@{record.failure_step}" if record.failed else (
            f"loss {record.losses[-1]:.4f}"
        )
        print(f"  {slug} run {run_index}: {status} ({record.wall_clock:.1f}s)")

    return show


def cmd_reproduce_fig2(args) -> int:
    kwargs = _sweep_kwargs(args)
    bundle = experiment.reproduce_fig2(
        args.out, jobs=args.jobs, progress=_progress_printer(args.verbose), **kwargs
    )
    lines = [
        f"{'cell':24s} {'final mean loss':>16s} {'std':>10s} {'failed':>7s}"
    ]
    for slug, cell in bundle.cells.items():
        if cell.mean_losses is None:
            lines.append(f"{slug:24s} {'all runs failed':>16s} {'':>10s} {cell.n_failed:7d}")
        else:
            lines.append(
                f"{slug:24s} {cell.mean_losses[-1]:16.6f} "
                f"{cell.std_losses[-1]:10.6f} {cell.n_failed:7d}"
            )
    if args.out is not None:
        lines.append(f"artifacts under {args.out}")
    _emit(args, "reproduce-fig2-summary.txt", lines)
    return 0


def cmd_timing(args) -> int:
    kwargs = _sweep_kwargs(args)
    # wall-clock comparison is only meaningful without core contention
    bundle = experiment.reproduce_fig2(
        args.out, jobs=1, progress=_progress_printer(args.verbose), **kwargs
    )
    rows = experiment.timing_table(bundle)
    lines = [f"{'cell':24s} {'mean s':>10s} {'std s':>10s} {'vs uniform':>11s}"]
    for row in rows:
        ratio = "-" if row.ratio_to_uniform is None else f"{row.ratio_to_uniform:.2f}x"
        lines.append(
            f"{experiment.cell_slug(row.optimizer, row.scheme):24s} "
            f"{row.mean_s:10.3f} {row.std_s:10.3f} {ratio:>11s}"
        )
    if args.out is not None:
        experiment.write_timing_csv(rows, Path(args.out) / "timing.csv")
    _emit(args, "timing-summary.txt", lines)
    return 0


def cmd_eval_scheme(args) -> int:
    config = resolve_run_config(
        args, scheme=args.candidate, metric_enabled=True
    )
    record = experiment.run_training(config, args.run_index)
    if record.failed:
        print(f"error: run diverged at step {record.failure_step}", file=sys.stderr)
        return 1
    if not record.metric_records:
        print("error: run produced no metric records (steps too small?)", file=sys.stderr)
        return 1
    lines = [
        f"candidate {args.candidate}, optimizer {config.optimizer}, "
        f"{config.steps} steps, subset size {record.metric_records[0].m}",
    ]
    for summary in metric.aggregate(record.metric_records):
        closer = "closer than uniform" if summary.d_p.mean < summary.d_u.mean else (
            "not closer than uniform"
        )
        lines.append(
            f"{summary.divergence:3s} candidate {summary.d_p.mean:.6e} "
            f"+- {summary.d_p.std:.1e}   uniform {summary.d_u.mean:.6e} "
            f"+- {summary.d_u.std:.1e}   ({summary.count} records, {closer})"
        )
    flagged = sum(1 for r in record.metric_records if r.flagged)
    if flagged:
        lines.append(f"{flagged} records flagged (all-zero subset gradients)")
    _emit(args, "eval-scheme-summary.txt", lines)
    if args.out is not None:
        metric.write_records_csv(record.metric_records, Path(args.out) / "metric.csv")
    return 0


# ---- verification subcommands ----


def cmd_speed_check(args) -> int:
    rng = np.random.default_rng(_seed(args))
    lines = []
    ok = True
    for kind in ("sgd", "momentum", "rmsprop", "adam"):
        worst = 0.0
        for _ in range(args.trials):
            ctx, state = speed.random_instance(rng, kind)
            closed = speed.speed_closed(ctx, state)
            oracle = speed.speed_oracle(ctx, state)
            worst = max(worst, abs(closed - oracle) / max(1.0, abs(oracle)))
        passed = worst < SPEED_CHECK_TOL
        ok &= passed
        lines.append(
            f"{kind:9s} worst |closed - oracle| / max(1, |oracle|) = {worst:.3e} "
            f"over {args.trials} trials: {'PASS' if passed else 'FAIL'}"
        )
    lines.append(f"speed-check: {'PASS' if ok else 'FAIL'}")
    _emit(args, "speed-check-report.txt", lines)
    return 0 if ok else 1


def _fd_worst_gap(model, inputs, labels, rng, probes, coords_per_probe=None):
    worst = 0.0
    for _ in range(probes):
        i = int(rng.integers(inputs.shape[0]))
        x, y = inputs[i], int(labels[i])
        exact = model.per_sample_gradient(x, y)
        if coords_per_probe is None:
            coords = np.arange(model.n_params)
        else:
            coords = rng.choice(model.n_params, size=coords_per_probe, replace=False)
        fd = models.finite_diff_gradient(model, x, y, h=1e-5, coords=coords)
        scale = np.maximum(np.abs(fd), 1e-8)
        worst = max(worst, float(np.max(np.abs(exact[coords] - fd) / scale)))
    return worst


def cmd_grad_check(args) -> int:
    rng = np.random.default_rng(_seed(args))
    lines = []
    ok = True

    mlp = models.Mlp([12, 10, 4], rng)
    X = rng.normal(size=(max(args.probes, 4), 12))
    Y = rng.integers(4, size=X.shape[0])
    worst = _fd_worst_gap(mlp, X, Y, rng, args.probes)
    passed = worst < GRAD_CHECK_TOL
    ok &= passed
    lines.append(
        f"mlp      worst relative gap {worst:.3e} over {args.probes} full-gradient "
        f"probes: {'PASS' if passed else 'FAIL'}"
    )

    cnn = models.ConvNet(rng)
    X = rng.random((max(args.probes, 4), 28, 28))
    Y = rng.integers(2, size=X.shape[0])
    worst = _fd_worst_gap(cnn, X, Y, rng, args.probes, coords_per_probe=args.cnn_coords)
    passed = worst < GRAD_CHECK_TOL
    ok &= passed
    lines.append(
        f"convnet  worst relative gap {worst:.3e} over {args.probes} probes of "
        f"{args.cnn_coords} coordinates: {'PASS' if passed else 'FAIL'}"
    )
    lines.append(f"grad-check: {'PASS' if ok else 'FAIL'}")
    _emit(args, "grad-check-report.txt", lines)
    return 0 if ok else 1


def cmd_verify_theorem(args) -> int:
    rng = np.random.default_rng(_seed(args))
    sandwich_fail = 0
    optimal_fail = 0
    worst_eq = 0.0
    done = 0
    attempts = 0
    while done < args.trials:
        attempts += 1
        if attempts > 20 * args.trials:
            raise RuntimeError("random scheme generation kept leaving the box")
        n = int(rng.integers(5, 40))
        norms = rng.uniform(0.05, 3.0, size=n)
        u = uniform(n)
        pgn = gradient_norm_scheme(norms)
        p = speed.random_box_scheme(rng, pgn, u)
        if p is None:
            continue
        done += 1
        cert = speed.sandwich_certificate(u, pgn, p, norms)
        if not cert.ok:
            sandwich_fail += 1
        target = float(norms.sum()) ** 2
        worst_eq = max(worst_eq, abs(cert.h_gradnorm - target) / max(1.0, abs(target)))
        for _ in range(5):
            q = normalize(rng.random(n) + 0.01)
            h_q = speed.variance_functional(q, norms)
            if h_q < cert.h_gradnorm * (1.0 - SANDWICH_SLACK):
                optimal_fail += 1

    lines = []
    ok = True
    passed = sandwich_fail == 0
    ok &= passed
    lines.append(
        f"variance sandwich held for {args.trials - sandwich_fail}/{args.trials} "
        f"box schemes: {'PASS' if passed else 'FAIL'}"
    )
    passed = worst_eq < OPTIMUM_EQUALITY_TOL
    ok &= passed
    lines.append(
        f"optimal value equals squared norm sum, worst relative gap {worst_eq:.3e}: "
        f"{'PASS' if passed else 'FAIL'}"
    )
    passed = optimal_fail == 0
    ok &= passed
    lines.append(
        f"no scheme beat the gradient-norm optimum in {5 * args.trials} random "
        f"draws: {'PASS' if passed else 'FAIL'}"
    )
    lines.append(f"verify-theorem: {'PASS' if ok else 'FAIL'}")
    _emit(args, "verify-theorem-report.txt", lines)
    return 0 if ok else 1


def cmd_fetch_data(args) -> int:
    directory = Path(args.data_dir) if args.data_dir is not None else data.default_data_dir()
    try:
        train, test = data.load_binary_task(directory, n_train=args.n_train or 100,
                                            seed=_seed(args))
    except (FileNotFoundError, data.IdxFormatError, ValueError) as exc:
        print(
            f"error: corpus not usable under {directory}: {exc}\n"
            "point --data-dir or the ISGDLAB_DATA environment variable at a "
            "directory with train/t10k image and label files",
            file=sys.stderr,
        )
        return 1
    lines = [
        f"corpus directory {directory}",
        f"train subset: {train.n} items, "
        f"{int((train.labels == 0).sum())} zeros / {int((train.labels == 1).sum())} ones",
        f"test split:   {test.n} items, "
        f"{int((test.labels == 0).sum())} zeros / {int((test.labels == 1).sum())} ones",
        f"image shape {train.inputs.shape[1:]}, values in "
        f"[{train.inputs.min():.3f}, {train.inputs.max():.3f}]",
        "fetch-data: PASS",
    ]
    _emit(args, "fetch-data-report.txt", lines)
    return 0


# ---- parser ----


def _add_run_flags(sub, schemes_too=True):
    sub.add_argument("--model", help="model tag: convnet or mlp:<sizes>")
    sub.add_argument("--dataset", help="binary or blobs:<n>:<dim>:<sep>")
    sub.add_argument("--optimizer", choices=experiment.OPTIMIZERS)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--momentum", type=float)
    sub.add_argument("--alpha", type=float)
    sub.add_argument("--beta1", type=float)
    sub.add_argument("--beta2", type=float)
    sub.add_argument("--eps", type=float)
    sub.add_argument("--second-moment", dest="second_moment",
                     choices=experiment.SECOND_MOMENT_MODES)
    if schemes_too:
        sub.add_argument("--scheme", help="uniform, gradnorm, or mix:<t>")
    sub.add_argument("--steps", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--repetitions", type=int)
    sub.add_argument("--n-train", dest="n_train", type=int)
    sub.add_argument("--grad-chunk", dest="grad_chunk", type=int)
    sub.add_argument("--metric", action=argparse.BooleanOptionalAction, default=None,
                     help="record scheme-quality metrics during the run")
    sub.add_argument("--metric-m", dest="metric_m", type=int)
    sub.add_argument("--metric-every", dest="metric_every", type=int)
    sub.add_argument("--importance-weight", dest="importance_weight",
                     action=argparse.BooleanOptionalAction, default=None,
                     help="apply 1/(N p_i) weights (disable only for diagnostics)")
    sub.add_argument("--accuracy", action=argparse.BooleanOptionalAction, default=None,
                     help="evaluate final accuracy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isgdlab",
        description="importance-sampling SGD laboratory",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="base seed (default 0 or the config file value)")
    common.add_argument("--config", type=Path, default=None,
                        help="INI file with a [run] section")
    common.add_argument("--out", type=Path, default=None,
                        help="directory for artifacts and reports")
    common.add_argument("--data-dir", dest="data_dir", type=Path, default=None,
                        help="digit corpus directory (else $ISGDLAB_DATA or the "
                             "packaged corpus)")

    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="one training run")
    _add_run_flags(s)
    s.add_argument("--run-index", dest="run_index", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reproduce-fig2", parents=[common],
                       help="loss curves over the optimizer-by-scheme grid")
    _add_run_flags(s, schemes_too=False)
    s.add_argument("--full", action="store_true",
                   help="full protocol: 300 steps, 45 repetitions")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_reproduce_fig2)

    s = sub.add_parser("timing", parents=[common],
                       help="sequential wall-clock table for the grid")
    _add_run_flags(s, schemes_too=False)
    s.add_argument("--full", action="store_true",
                   help="full protocol: 300 steps, 45 repetitions")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_timing)

    s = sub.add_parser("eval-scheme", parents=[common],
                       help="scheme-quality records for a candidate scheme")
    _add_run_flags(s, schemes_too=False)
    s.add_argument("--candidate", required=True,
                   help="scheme to evaluate: uniform, gradnorm, or mix:<t>")
    s.add_argument("--run-index", dest="run_index", type=int, default=0)
    s.set_defaults(func=cmd_eval_scheme)

    s = sub.add_parser("speed-check", parents=[common],
                       help="closed forms vs. one-step enumeration oracle")
    s.add_argument("--trials", type=int, default=100)
    s.set_defaults(func=cmd_speed_check)

    s = sub.add_parser("grad-check", parents=[common],
                       help="backpropagation vs. finite differences")
    s.add_argument("--probes", type=int, default=20)
    s.add_argument("--cnn-coords", dest="cnn_coords", type=int, default=200)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("verify-theorem", parents=[common],
                       help="randomized variance-sandwich verification")
    s.add_argument("--trials", type=int, default=1000)
    s.set_defaults(func=cmd_verify_theorem)

    s = sub.add_parser("fetch-data", parents=[common],
                       help="verify the digit corpus is present and loadable")
    s.add_argument("--n-train", dest="n_train", type=int, default=None)
    s.set_defaults(func=cmd_fetch_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
