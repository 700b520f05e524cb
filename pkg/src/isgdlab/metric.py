"""Statistical quality assessment of a candidate sampling scheme.

One evaluation draws a uniform subset of M training items, builds the
norm-proportional reference scheme from the subset's per-sample gradient
norms at the current parameters, restricts the candidate to the subset, and
measures how far each of (candidate, uniform) sits from the reference under
both KL and total-variation divergences. Small d_p against large d_u means
the candidate tracks the gradient-norm scheme better than uniform does.

The uniform reference is restricted-and-renormalized through the same code
path as the candidate, so a uniform candidate yields d_p equal to d_u
exactly, not merely up to rounding.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import grad_table
from .schemes import (
    check_scheme,
    gradient_norm_scheme,
    kl_divergence,
    restrict_and_renormalize,
    total_variation,
    uniform,
)

DIVERGENCES = ("kl", "tv")
DEFAULT_SUBSET_SIZE = 32

CSV_HEADER = ("step", "divergence", "d_p", "d_u", "m", "flagged")


@dataclass(frozen=True)
class SchemeQualityRecord:
    """One subset evaluation under one divergence."""

    step: int
    divergence: str
    d_p: float
    d_u: float
    m: int
    flagged: bool

    def __post_init__(self):
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"divergence must be one of {DIVERGENCES}")
        if self.m < 2:
            raise ValueError(f"subset size must be >= 2, got {self.m}")
        if self.d_p < 0.0 or self.d_u < 0.0:
            raise ValueError("divergence values must be nonnegative")


def _candidate_values(candidate, n: int) -> np.ndarray:
    """Candidate as per-item values over the full index set: either a scheme
    array of length n or a callable mapping an index array to positive
    values."""
    if callable(candidate):
        values = np.asarray(candidate(np.arange(n)), dtype=np.float64)
        if values.shape != (n,):
            raise ValueError(f"candidate callable returned shape {values.shape}, wanted ({n},)")
        if not np.all(np.isfinite(values)) or np.any(values <= 0.0):
            raise ValueError("candidate values must be finite and strictly positive")
        return values
    return check_scheme(candidate, n=n)


def evaluate_step(
    model,
    dataset,
    candidate,
    m: int = DEFAULT_SUBSET_SIZE,
    rng: np.random.Generator | None = None,
    step: int = 0,
) -> list[SchemeQualityRecord]:
    """One subset-based quality evaluation at the model's current parameters.

    Returns one record per divergence kind. A subset whose gradient norms
    are all zero makes the reference scheme fall back to uniform; such
    records are flagged rather than dropped.
    """
    n = dataset.n
    if not 2 <= m <= n:
        raise ValueError(f"subset size must lie in [2, {n}], got {m}")
    if rng is None:
        rng = np.random.default_rng()
    values = _candidate_values(candidate, n)
    subset = rng.choice(n, size=m, replace=False)
    norms = grad_table(
        model, dataset.inputs[subset], dataset.labels[subset], store_grads=False
    ).norms
    flagged = not np.any(norms > 0.0)
    reference = gradient_norm_scheme(norms)
    p_tilde = restrict_and_renormalize(values[subset])
    u_tilde = restrict_and_renormalize(uniform(n)[subset])
    records = []
    for name, div in (("kl", kl_divergence), ("tv", total_variation)):
        records.append(
            SchemeQualityRecord(
                step=step,
                divergence=name,
                d_p=div(p_tilde, reference),
                d_u=div(u_tilde, reference),
                m=m,
                flagged=flagged,
            )
        )
    return records


@dataclass(frozen=True)
class SeriesStats:
    """Mean, population std, and histogram of one divergence series."""

    mean: float
    std: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray


@dataclass(frozen=True)
class QualitySummary:
    divergence: str
    count: int
    d_p: SeriesStats
    d_u: SeriesStats


def _series_stats(values: np.ndarray, bins: int) -> SeriesStats:
    counts, edges = np.histogram(values, bins=bins)
    # constant series must report exactly zero spread, not mean-subtraction noise
    spread = 0.0 if values.max() == values.min() else float(values.std())
    return SeriesStats(
        mean=float(values.mean()),
        std=spread,
        hist_counts=counts,
        hist_edges=edges,
    )


def aggregate(records, bins: int = 30) -> list[QualitySummary]:
    """Per-divergence means, population stds, and histograms across records."""
    records = list(records)
    if not records:
        raise ValueError("need at least one record to aggregate")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    out = []
    for name in DIVERGENCES:
        group = [r for r in records if r.divergence == name]
        if not group:
            continue
        d_p = np.array([r.d_p for r in group])
        d_u = np.array([r.d_u for r in group])
        out.append(
            QualitySummary(
                divergence=name,
                count=len(group),
                d_p=_series_stats(d_p, bins),
                d_u=_series_stats(d_u, bins),
            )
        )
    return out


def summary_as_dict(summary: QualitySummary) -> dict:
    """JSON-ready form of one summary."""
    def series(s: SeriesStats) -> dict:
        return {
            "mean": s.mean,
            "std": s.std,
            "hist_counts": s.hist_counts.tolist(),
            "hist_edges": s.hist_edges.tolist(),
        }

    return {
        "divergence": summary.divergence,
        "count": summary.count,
        "d_p": series(summary.d_p),
        "d_u": series(summary.d_u),
    }


def write_records_csv(records, path) -> None:
    """Stream records to CSV with columns step,divergence,d_p,d_u,m,flagged."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(
                [r.step, r.divergence, repr(r.d_p), repr(r.d_u), r.m, int(r.flagged)]
            )


def read_records_csv(path) -> list[SchemeQualityRecord]:
    """Inverse of write_records_csv."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                SchemeQualityRecord(
                    step=int(row["step"]),
                    divergence=row["divergence"],
                    d_p=float(row["d_p"]),
                    d_u=float(row["d_u"]),
                    m=int(row["m"]),
                    flagged=bool(int(row["flagged"])),
                )
            )
    return out
