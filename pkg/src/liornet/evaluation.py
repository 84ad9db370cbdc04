"""Confusion metrics, F-beta scores, aggregation and runtime benchmarking.

Snow is the positive class. Aggregates report the arithmetic mean and the
population standard deviation across scans.
"""

from __future__ import annotations

import math
import os
import platform
import time
from dataclasses import dataclass, field, fields

import numpy as np

METRICS = ("precision", "recall_tpr", "fpr", "fnr", "iou")
PER_SCAN = "per_scan"
POOLED = "pooled"


@dataclass(frozen=True)
class MetricsRecord:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall_tpr: float
    fpr: float
    fnr: float
    iou: float
    degenerate: frozenset = field(default_factory=frozenset)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def fbeta(self, beta: float) -> float:
        return fbeta(self.precision, self.recall_tpr, beta)


def _ratio(num, den, fallback, name, flags):
    if den == 0:
        flags.add(name)
        return fallback
    return num / den


def from_counts(tp: int, fp: int, fn: int, tn: int) -> MetricsRecord:
    """Derive scores from counts; an empty denominator flags the metric as degenerate."""
    flags = set()
    return MetricsRecord(
        tp, fp, fn, tn,
        precision=_ratio(tp, tp + fp, 1.0, "precision", flags),
        recall_tpr=_ratio(tp, tp + fn, 1.0, "recall_tpr", flags),
        fpr=_ratio(fp, fp + tn, 0.0, "fpr", flags),
        fnr=_ratio(fn, tp + fn, 0.0, "fnr", flags),
        iou=_ratio(tp, tp + fp + fn, 1.0, "iou", flags),
        degenerate=frozenset(flags),
    )


def confusion(pred, gt) -> MetricsRecord:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction length {pred.shape} != ground truth length {gt.shape}")
    p, g = pred.astype(bool), gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return from_counts(tp, fp, fn, tn)


def fbeta(precision: float, recall: float, beta: float) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    b2 = beta * beta
    den = b2 * precision + recall
    if den == 0:
        return 0.0
    return (1 + b2) * precision * recall / den


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    n: int
    excluded: int

    def __str__(self):
        return f"{self.mean:.3f} ± {self.std:.3f}"


def aggregate(records, mode: str = PER_SCAN, betas=(1, 3, 5)) -> dict[str, Summary]:
    """Mean and population std of each metric (plus F-beta) over scans.

    ``per_scan`` averages per-scan scores, skipping degenerate values;
    ``pooled`` sums the confusion counts first and reports std 0.
    """
    records = list(records)
    if not records:
        raise ValueError("aggregate() needs at least one record")
    if mode == POOLED:
        tot = from_counts(*(sum(getattr(r, k) for r in records) for k in ("tp", "fp", "fn", "tn")))
        out = {m: Summary(getattr(tot, m), 0.0, 1, int(m in tot.degenerate)) for m in METRICS}
        for b in betas:
            out[f"f{b}"] = Summary(tot.fbeta(b), 0.0, 1, 0)
        return out
    if mode != PER_SCAN:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    out = {}
    for m in METRICS:
        vals = [getattr(r, m) for r in records if m not in r.degenerate]
        excluded = len(records) - len(vals)
        if not vals:
            raise ValueError(f"no non-degenerate values for {m}")
        arr = np.asarray(vals, dtype=np.float64)
        out[m] = Summary(float(arr.mean()), float(arr.std()), len(vals), excluded)
    usable = [r for r in records if not ({"precision", "recall_tpr"} & r.degenerate)]
    for b in betas:
        vals = np.asarray([r.fbeta(b) for r in usable] or [0.0])
        out[f"f{b}"] = Summary(float(vals.mean()), float(vals.std()), len(usable),
                               len(records) - len(usable))
    return out


@dataclass(frozen=True)
class BenchResult:
    mean_ms: float
    hz: float
    reps: int
    scans: int
    environment: dict = field(default_factory=dict)


def hz_from_ms(mean_ms: float) -> float:
    return 1000.0 / mean_ms


def environment() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "omp_threads": os.environ.get("OMP_NUM_THREADS", "unset"),
    }


def bench(filter_fn, scans, warmup: int = 1, reps: int = 3) -> BenchResult:
    """Mean wall-clock milliseconds per scan over ``reps`` passes after ``warmup`` passes."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    scans = list(scans)
    if not scans:
        raise ValueError("bench() needs at least one scan")
    for _ in range(warmup):
        for s in scans:
            filter_fn(s)
    times = []
    for _ in range(reps):
        for s in scans:
            t0 = time.perf_counter()
            filter_fn(s)
            times.append((time.perf_counter() - t0) * 1000.0)
    mean_ms = float(np.mean(times))
    return BenchResult(mean_ms, hz_from_ms(mean_ms), reps, len(scans), environment())


def format_hz(hz: float) -> str:
    return f"{hz:.1f}"


def format_report(name_to_summary: dict, title: str = "metrics", mode: str = PER_SCAN) -> str:
    """Aligned plain-text table: one row per method, metric columns as mean ± std."""
    cols = list(next(iter(name_to_summary.values())).keys()) if name_to_summary else []
    header = [f"# {title} (aggregation: {mode}; ± is population std)"]
    width = max([len(n) for n in name_to_summary] + [6])
    header.append("method".ljust(width) + "".join(c.rjust(17) for c in cols))
    for name, summ in name_to_summary.items():
        header.append(name.ljust(width) + "".join(str(summ[c]).rjust(17) for c in cols))
    return "\n".join(header) + "\n"


def format_kv(prefix: str, summary: dict) -> str:
    lines = []
    for key, s in summary.items():
        lines.append(f"{prefix}.{key}.mean={s.mean!r}")
        lines.append(f"{prefix}.{key}.std={s.std!r}")
        lines.append(f"{prefix}.{key}.n={s.n}")
        lines.append(f"{prefix}.{key}.excluded={s.excluded}")
    return "\n".join(lines) + "\n"


def format_bench(rows: dict) -> str:
    width = max([len(n) for n in rows] + [6])
    out = ["# runtime (single worker)", "method".ljust(width) + "ms".rjust(12) + "Hz".rjust(8)]
    for name, res in rows.items():
        out.append(name.ljust(width) + f"{res.mean_ms:12.2f}" + format_hz(res.hz).rjust(8))
    return "\n".join(out) + "\n"


def record_kv(prefix: str, rec: MetricsRecord) -> str:
    lines = [f"{prefix}.{f.name}={getattr(rec, f.name)!r}" for f in fields(rec) if f.name != "degenerate"]
    lines.append(f"{prefix}.degenerate={','.join(sorted(rec.degenerate))}")
    return "\n".join(lines) + "\n"


def is_close_hz(mean_ms: float, hz: float) -> bool:
    return math.isclose(hz * mean_ms, 1000.0, rel_tol=1e-12)
