"""Training runs that compare minibatch sampling schemes.

run_training executes one seeded run: a model trained for a fixed number
of steps with an optimizer from optim and a sampling scheme that is either
uniform, proportional to per-item gradient norms, or a convex mixture of
the two. Non-uniform schemes are refreshed from a fresh gradient-norm
table before every step, and each batch gradient is importance-weighted
so the step direction stays an unbiased estimate of the full-batch
gradient. reproduce_fig2 sweeps the optimizer-by-scheme grid and writes
loss curves, per-run records, scheme-quality records, and a timing table.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import data, metric, models, optim
from .schemes import convex_mix, gradient_norm_scheme, sample_indices, uniform

OPTIMIZERS = ("sgd", "momentum", "rmsprop", "adam")
SECOND_MOMENT_MODES = ("scalar", "elementwise")

# optimizer-by-scheme grid for the loss-curve comparison; the adaptive
# optimizers skip the mixture column
FIG2_CELLS = (
    ("sgd", "uniform"),
    ("sgd", "gradnorm"),
    ("sgd", "mix:0.5"),
    ("momentum", "uniform"),
    ("momentum", "gradnorm"),
    ("momentum", "mix:0.5"),
    ("rmsprop", "uniform"),
    ("rmsprop", "gradnorm"),
    ("adam", "uniform"),
    ("adam", "gradnorm"),
)

CURVES_HEADER = ("optimizer", "scheme", "step", "mean_loss", "std_loss")
TIMING_HEADER = ("optimizer", "scheme", "repetitions", "mean_s", "std_s", "ratio_to_uniform")
METRIC_HEADER = ("optimizer", "scheme", "run", "step", "divergence", "d_p", "d_u", "m", "flagged")


def parse_scheme(spec: str):
    """Parse a scheme spelling into (kind, mix_t).

    Accepted spellings: 'uniform', 'gradnorm', and 'mix:<t>' with t in
    [0, 1], where t is the weight on the gradient-norm scheme (so mix:0
    samples uniformly and mix:1 matches gradnorm).
    """
    if spec == "uniform":
        return "uniform", None
    if spec == "gradnorm":
        return "gradnorm", None
    if spec.startswith("mix:"):
        try:
            t = float(spec[4:])
        except ValueError:
            raise ValueError(f"bad mixture weight in scheme {spec!r}") from None
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"mixture weight must lie in [0, 1], got {t}")
        return "mix", t
    raise ValueError(
        f"unknown scheme {spec!r}; expected 'uniform', 'gradnorm', or 'mix:<t>'"
    )


def cell_slug(optimizer: str, scheme: str) -> str:
    """Filesystem-safe cell name, e.g. ('sgd', 'mix:0.5') -> 'sgd-mix0.5'."""
    return f"{optimizer}-{scheme.replace(':', '')}"


@dataclass(frozen=True)
class RunConfig:
    """Complete description of one training run (and its repetitions)."""

    model: str = "convnet"
    dataset: str = "binary"
    data_dir: str | None = None
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.5
    alpha: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    second_moment: str = "elementwise"
    scheme: str = "uniform"
    steps: int = 100
    batch_size: int = 5
    repetitions: int = 5
    base_seed: int = 0
    n_train: int = 100
    grad_chunk: int = 25
    metric_enabled: bool = False
    metric_m: int = 32
    metric_every: int = 1
    apply_importance_weight: bool = True
    eval_final_accuracy: bool = False

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.second_moment not in SECOND_MOMENT_MODES:
            raise ValueError(
                f"second_moment must be one of {SECOND_MOMENT_MODES}, got {self.second_moment!r}"
            )
        parse_scheme(self.scheme)
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.base_seed < 0:
            raise ValueError(f"base_seed must be >= 0, got {self.base_seed}")
        if self.n_train < 2:
            raise ValueError(f"n_train must be >= 2, got {self.n_train}")
        if self.grad_chunk < 1:
            raise ValueError(f"grad_chunk must be >= 1, got {self.grad_chunk}")
        if self.metric_m < 2:
            raise ValueError(f"metric_m must be >= 2, got {self.metric_m}")
        if self.metric_every < 1:
            raise ValueError(f"metric_every must be >= 1, got {self.metric_every}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


@dataclass
class RunRecord:
    """Everything one training run produced.

    losses holds the full-train mean loss before any update and after
    every completed step; a diverging run is cut short at failure_step
    with failed set, so its curve is shorter than steps + 1.
    """

    config: RunConfig
    run_index: int
    losses: np.ndarray
    wall_clock: float
    grad_table_passes: int
    failed: bool = False
    failure_step: int | None = None
    final_accuracy: float | None = None
    metric_records: list = field(default_factory=list)
    final_scheme: np.ndarray | None = None


def _resolve_data(config: RunConfig):
    """(train, test-or-None) datasets named by config.dataset."""
    if config.dataset == "binary":
        return data.load_binary_task(
            config.data_dir, n_train=config.n_train, seed=config.base_seed
        )
    if config.dataset.startswith("blobs:"):
        parts = config.dataset.split(":")
        if len(parts) != 4:
            raise ValueError(
                f"blobs dataset spec must be 'blobs:<n>:<dim>:<sep>', got {config.dataset!r}"
            )
        n, dim, sep = int(parts[1]), int(parts[2]), float(parts[3])
        return data.synthetic_blobs(n, dim, sep, seed=config.base_seed), None
    raise ValueError(
        f"unknown dataset {config.dataset!r}; expected 'binary' or 'blobs:<n>:<dim>:<sep>'"
    )


def _adapt_inputs(model_tag: str, ds):
    """Flatten image inputs for fully connected models."""
    if ds is None or not model_tag.startswith("mlp") or ds.inputs.ndim <= 2:
        return ds
    flat = ds.inputs.reshape(ds.inputs.shape[0], -1)
    return dataclasses.replace(ds, inputs=flat)


def run_training(config: RunConfig, run_index: int, train=None, test=None) -> RunRecord:
    """Execute one seeded training run.

    Seeding: SeedSequence((base_seed, run_index)) is split into three
    independent streams, for parameter initialization, batch sampling, and
    the scheme-quality metric. The metric stream is separate so switching
    the metric on or off cannot change the trajectory. Two calls with the
    same (base_seed, run_index) produce bit-identical loss curves.

    Each step: refresh the scheme from a fresh norms-only gradient table
    (uniform runs skip this; grad_table_passes counts the refreshes), draw
    batch_size indices with replacement, build the importance-weighted
    gradient estimate, apply one optimizer step, and record the mean loss
    over the whole training set. Divergence aborts the run and is recorded
    rather than raised.
    """
    if run_index < 0:
        raise ValueError(f"run_index must be >= 0, got {run_index}")
    if train is None:
        train, test = _resolve_data(config)
    train = _adapt_inputs(config.model, train)
    test = _adapt_inputs(config.model, test)
    seeds = np.random.SeedSequence((config.base_seed, run_index)).spawn(3)
    rng_init = np.random.default_rng(seeds[0])
    rng_sample = np.random.default_rng(seeds[1])
    rng_metric = np.random.default_rng(seeds[2])

    model = models.model_from_tag(config.model, rng_init)
    state = optim.make_state(
        config.optimizer,
        lr=config.lr,
        momentum=config.momentum,
        alpha=config.alpha,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        second_moment=config.second_moment,
    )
    kind, mix_t = parse_scheme(config.scheme)

    X, Y = train.inputs, train.labels
    n = train.n
    u = uniform(n)
    p = u
    m_eff = min(config.metric_m, n)
    batch_buf = np.empty((config.batch_size, model.n_params))
    losses = [model.mean_loss(X, Y)]
    metric_records: list = []
    passes = 0
    failed = False
    failure_step = None

    t_start = time.perf_counter()
    for step_no in range(1, config.steps + 1):
        if kind != "uniform":
            table = models.grad_table(
                model, X, Y, chunk_size=config.grad_chunk, store_grads=False
            )
            passes += 1
            pgn = gradient_norm_scheme(table.norms)
            p = pgn if kind == "gradnorm" else convex_mix(pgn, u, mix_t)
        idx = sample_indices(p, config.batch_size, rng_sample)
        rows = model.per_sample_gradients(X[idx], Y[idx], out=batch_buf)
        try:
            estimate = optim.build_estimate(
                rows, p, idx, weighted=config.apply_importance_weight, aligned=True
            )
            theta_new, state = optim.step(state, model.params, estimate.vector)
        except optim.DivergenceError:
            failed = True
            failure_step = step_no
            break
        model.params[...] = theta_new
        loss = model.mean_loss(X, Y)
        if not np.isfinite(loss):
            failed = True
            failure_step = step_no
            break
        losses.append(loss)
        if config.metric_enabled and step_no % config.metric_every == 0:
            metric_records.extend(
                metric.evaluate_step(model, train, p, m=m_eff, rng=rng_metric, step=step_no)
            )
    wall = time.perf_counter() - t_start

    accuracy = None
    if config.eval_final_accuracy and not failed:
        ref = test if test is not None else train
        accuracy = model.accuracy(ref.inputs, ref.labels)
    return RunRecord(
        config=config,
        run_index=run_index,
        losses=np.asarray(losses),
        wall_clock=wall,
        grad_table_passes=passes,
        failed=failed,
        failure_step=failure_step,
        final_accuracy=accuracy,
        metric_records=metric_records,
        final_scheme=p,
    )


@dataclass
class CellResult:
    """All repetitions of one (optimizer, scheme) cell plus their summary."""

    optimizer: str
    scheme: str
    config: RunConfig
    runs: list[RunRecord]
    mean_losses: np.ndarray | None
    std_losses: np.ndarray | None

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.runs if r.failed)


@dataclass
class Fig2Bundle:
    """Results of a full grid sweep, keyed by cell slug."""

    cells: dict[str, CellResult]
    out_dir: Path | None
    jobs: int

    def cell(self, optimizer: str, scheme: str) -> CellResult:
        return self.cells[cell_slug(optimizer, scheme)]


def _aggregate_cell(config: RunConfig, runs: list[RunRecord]) -> CellResult:
    ok = [r for r in runs if not r.failed]
    if ok:
        stack = np.stack([r.losses for r in ok])
        mean = stack.mean(axis=0)
        std = stack.std(axis=0)
    else:
        mean = None
        std = None
    return CellResult(
        optimizer=config.optimizer,
        scheme=config.scheme,
        config=config,
        runs=runs,
        mean_losses=mean,
        std_losses=std,
    )


def reproduce_fig2(
    out_dir=None,
    *,
    steps: int = 100,
    repetitions: int = 5,
    batch_size: int = 5,
    lr: float = 0.01,
    momentum: float = 0.5,
    base_seed: int = 0,
    dataset: str = "binary",
    model: str = "convnet",
    data_dir=None,
    n_train: int = 100,
    second_moment: str = "elementwise",
    metric_enabled: bool = False,
    metric_m: int = 32,
    metric_every: int = 1,
    grad_chunk: int = 25,
    jobs: int = 1,
    progress=None,
) -> Fig2Bundle:
    """Sweep the optimizer-by-scheme grid and aggregate loss curves.

    Every cell reuses the same dataset, initialization seeds, and budget,
    so scheme comparisons are paired run by run. With jobs > 1 the runs
    execute in worker processes (results are identical to sequential
    execution; the per-run seeding does not depend on scheduling). When
    out_dir is given, curves.csv, metric.csv, runs/<cell>/<index>.json,
    and, for sequential sweeps with at least two repetitions, timing.csv
    are written there. progress, if given, is called as
    progress(slug, run_index, record) after each finished run.
    """
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    configs = {}
    for optimizer, scheme in FIG2_CELLS:
        configs[cell_slug(optimizer, scheme)] = RunConfig(
            model=model,
            dataset=dataset,
            data_dir=None if data_dir is None else str(data_dir),
            optimizer=optimizer,
            lr=lr,
            momentum=momentum,
            second_moment=second_moment,
            scheme=scheme,
            steps=steps,
            batch_size=batch_size,
            repetitions=repetitions,
            base_seed=base_seed,
            n_train=n_train,
            grad_chunk=grad_chunk,
            metric_enabled=metric_enabled,
            metric_m=metric_m,
            metric_every=metric_every,
        )

    cells: dict[str, CellResult] = {}
    if jobs == 1:
        train, test = _resolve_data(next(iter(configs.values())))
        for slug, cfg in configs.items():
            runs = []
            for r in range(cfg.repetitions):
                record = run_training(cfg, r, train=train, test=test)
                if progress is not None:
                    progress(slug, r, record)
                runs.append(record)
            cells[slug] = _aggregate_cell(cfg, runs)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                (slug, r): pool.submit(run_training, cfg, r)
                for slug, cfg in configs.items()
                for r in range(cfg.repetitions)
            }
            collected: dict[str, list[RunRecord]] = {slug: [] for slug in configs}
            for (slug, r), fut in futures.items():
                record = fut.result()
                if progress is not None:
                    progress(slug, r, record)
                collected[slug].append(record)
        for slug, cfg in configs.items():
            runs = sorted(collected[slug], key=lambda rec: rec.run_index)
            cells[slug] = _aggregate_cell(cfg, runs)

    bundle = Fig2Bundle(
        cells=cells, out_dir=None if out_dir is None else Path(out_dir), jobs=jobs
    )
    if bundle.out_dir is not None:
        write_bundle(bundle)
    return bundle


class TimingRow(NamedTuple):
    optimizer: str
    scheme: str
    repetitions: int
    mean_s: float
    std_s: float
    ratio_to_uniform: float | None


def timing_table(bundle: Fig2Bundle) -> list[TimingRow]:
    """Per-cell wall-clock summary with the slowdown relative to uniform.

    Requires a sequential bundle (jobs=1): wall clocks measured while
    worker processes compete for cores do not mean anything. Each cell
    needs at least two successful repetitions.
    """
    if bundle.jobs != 1:
        raise ValueError("timing requires a sequential bundle (jobs=1)")
    uniform_means: dict[str, float] = {}
    times: dict[str, list[float]] = {}
    for slug, cell in bundle.cells.items():
        ok = [r.wall_clock for r in cell.runs if not r.failed]
        if len(ok) < 2:
            raise ValueError(
                f"timing needs >= 2 successful repetitions, cell {slug} has {len(ok)}"
            )
        times[slug] = ok
        if cell.scheme == "uniform":
            uniform_means[cell.optimizer] = float(np.mean(ok))
    rows = []
    for slug, cell in bundle.cells.items():
        mean = float(np.mean(times[slug]))
        std = float(np.std(times[slug]))
        base = uniform_means.get(cell.optimizer)
        ratio = None if base is None or base == 0.0 else mean / base
        rows.append(
            TimingRow(
                optimizer=cell.optimizer,
                scheme=cell.scheme,
                repetitions=len(times[slug]),
                mean_s=mean,
                std_s=std,
                ratio_to_uniform=ratio,
            )
        )
    return rows


# ---- serialization ----


def run_record_to_dict(record: RunRecord) -> dict:
    return {
        "schema": "isgdlab-run-v1",
        "optimizer": record.config.optimizer,
        "scheme": record.config.scheme,
        "run_index": record.run_index,
        "config": record.config.to_dict(),
        "losses": [float(v) for v in record.losses],
        "wall_clock_s": float(record.wall_clock),
        "grad_table_passes": record.grad_table_passes,
        "failed": record.failed,
        "failure_step": record.failure_step,
        "final_accuracy": record.final_accuracy,
        "metric_records": [
            {
                "step": int(m.step),
                "divergence": m.divergence,
                "d_p": float(m.d_p),
                "d_u": float(m.d_u),
                "m": int(m.m),
                "flagged": bool(m.flagged),
            }
            for m in record.metric_records
        ],
    }


def write_curves_csv(bundle: Fig2Bundle, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVES_HEADER)
        for cell in bundle.cells.values():
            if cell.mean_losses is None:
                continue
            for step, (mean, std) in enumerate(zip(cell.mean_losses, cell.std_losses)):
                writer.writerow(
                    [cell.optimizer, cell.scheme, step, repr(float(mean)), repr(float(std))]
                )


def write_timing_csv(rows: list[TimingRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TIMING_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.optimizer,
                    row.scheme,
                    row.repetitions,
                    repr(row.mean_s),
                    repr(row.std_s),
                    "" if row.ratio_to_uniform is None else repr(row.ratio_to_uniform),
                ]
            )


def write_metric_csv(bundle: Fig2Bundle, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_HEADER)
        for cell in bundle.cells.values():
            for record in cell.runs:
                for m in record.metric_records:
                    writer.writerow(
                        [
                            cell.optimizer,
                            cell.scheme,
                            record.run_index,
                            int(m.step),
                            m.divergence,
                            repr(float(m.d_p)),
                            repr(float(m.d_u)),
                            int(m.m),
                            bool(m.flagged),
                        ]
                    )


def write_bundle(bundle: Fig2Bundle) -> None:
    """Write curves.csv, metric.csv, per-run JSON, and (when measured
    sequentially with enough repetitions) timing.csv under bundle.out_dir."""
    out = bundle.out_dir
    if out is None:
        raise ValueError("bundle has no output directory")
    out.mkdir(parents=True, exist_ok=True)
    write_curves_csv(bundle, out / "curves.csv")
    write_metric_csv(bundle, out / "metric.csv")
    for slug, cell in bundle.cells.items():
        run_dir = out / "runs" / slug
        run_dir.mkdir(parents=True, exist_ok=True)
        for record in cell.runs:
            with open(run_dir / f"{record.run_index}.json", "w") as fh:
                json.dump(run_record_to_dict(record), fh, indent=2)
                fh.write("\n")
    try:
        rows = timing_table(bundle)
    except ValueError:
        return
    write_timing_csv(rows, out / "timing.csv")
