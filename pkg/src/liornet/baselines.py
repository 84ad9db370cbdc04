"""Classical snow filters used as baselines: ROR, SOR, DROR, LIOR and D-LIOR.

Each filter returns a :class:`~liornet.core.LabelSet` where 1 marks a point
removed as snow. Parameters have no code defaults; they come from the
``[filter.*]`` config sections.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .core import LabelSet, PointCloud
from .spatialindex import NeighborIndex


@dataclass(frozen=True)
class RORConfig:
    r: float
    n_min: int

    def __post_init__(self):
        _check(self.r > 0, "ror.r must be positive")
        _check(self.n_min >= 1, "ror.n_min must be >= 1")


@dataclass(frozen=True)
class SORConfig:
    k: int
    std_mult: float

    def __post_init__(self):
        _check(self.k >= 1, "sor.k must be >= 1")


@dataclass(frozen=True)
class DRORConfig:
    beam_angle_rad: float
    mult: float
    r_min: float
    n_min: int

    def __post_init__(self):
        _check(self.r_min > 0 and self.beam_angle_rad > 0 and self.mult > 0,
               "dror radii parameters must be positive")
        _check(self.n_min >= 1, "dror.n_min must be >= 1")


@dataclass(frozen=True)
class LIORConfig:
    I_fixed: float
    ris_radius: float
    ris_n_min: int

    def __post_init__(self):
        _check(self.ris_radius > 0, "lior.ris_radius must be positive")
        _check(self.ris_n_min >= 1, "lior.ris_n_min must be >= 1")


@dataclass(frozen=True)
class DLIORConfig:
    percentile: float
    window_scans: int
    floor_I: float
    ceil_I: float

    def __post_init__(self):
        _check(0 < self.percentile < 100, "dlior.percentile must lie in (0, 100)")
        _check(self.window_scans >= 1, "dlior.window_scans must be >= 1")
        _check(self.floor_I <= self.ceil_I, "dlior.floor_I must not exceed ceil_I")


@dataclass(frozen=True)
class FilterConfig:
    ror: RORConfig
    sor: SORConfig
    dror: DRORConfig
    lior: LIORConfig
    dlior: DLIORConfig


def _check(ok, msg):
    if not ok:
        raise ValueError(msg)


def ror(cloud: PointCloud, cfg: RORConfig, index: NeighborIndex | None = None) -> LabelSet:
    index = index or NeighborIndex(cloud.xyz)
    counts = index.radius_counts(cfg.r)
    return LabelSet.from_mask(counts < cfg.n_min)


def sor(cloud: PointCloud, cfg: SORConfig, index: NeighborIndex | None = None) -> LabelSet:
    n = len(cloud)
    if n < 2:
        return LabelSet.from_mask(np.zeros(n, dtype=bool))
    index = index or NeighborIndex(cloud.xyz)
    d = index.mean_knn_distance(cfg.k)
    limit = d.mean() + cfg.std_mult * d.std()
    return LabelSet.from_mask(d > limit)


def dror_radius(ranges, cfg: DRORConfig) -> np.ndarray:
    return np.maximum(cfg.r_min, cfg.mult * np.asarray(ranges, dtype=np.float64) * cfg.beam_angle_rad)


def dror(cloud: PointCloud, cfg: DRORConfig, index: NeighborIndex | None = None) -> LabelSet:
    index = index or NeighborIndex(cloud.xyz)
    counts = index.radius_counts(dror_radius(cloud.ranges(), cfg))
    return LabelSet.from_mask(counts < cfg.n_min)


def _ris(cloud, marked, radius, n_min, index):
    """Radius inlier saving: unmark points that sit in dense neighbourhoods."""
    idx = np.flatnonzero(marked)
    if len(idx) == 0:
        return marked
    index = index or NeighborIndex(cloud.xyz)
    counts = index.radius_counts(radius, members=idx)
    out = marked.copy()
    out[idx[counts >= n_min]] = False
    return out


def lior(cloud: PointCloud, cfg: LIORConfig, index: NeighborIndex | None = None,
         threshold: float | None = None) -> LabelSet:
    I_thr = cfg.I_fixed if threshold is None else threshold
    marked = cloud.intensity.astype(np.float64) <= I_thr
    return LabelSet.from_mask(_ris(cloud, marked, cfg.ris_radius, cfg.ris_n_min, index))


class DLIOR:
    """Stateful D-LIOR over a temporally ordered scan stream.

    The first scan uses LIOR's fixed threshold. Later scans use the
    clamped percentile of intensities of points labelled snow in the last
    ``window_scans`` scans; with no snow in the window the floor is used.
    """

    def __init__(self, lior_cfg: LIORConfig, cfg: DLIORConfig):
        self.lior_cfg = lior_cfg
        self.cfg = cfg
        self.history: deque[np.ndarray] = deque(maxlen=cfg.window_scans)
        self.thresholds: list[float] = []

    def next_threshold(self) -> float:
        if not self.thresholds:
            return float(self.lior_cfg.I_fixed)
        pool = np.concatenate(list(self.history)) if self.history else np.zeros(0)
        if len(pool) == 0:
            return float(self.cfg.floor_I)
        value = float(np.percentile(pool, self.cfg.percentile))
        return float(min(max(value, self.cfg.floor_I), self.cfg.ceil_I))

    def __call__(self, cloud: PointCloud, index: NeighborIndex | None = None) -> LabelSet:
        thr = self.next_threshold()
        labels = lior(cloud, self.lior_cfg, index=index, threshold=thr)
        self.thresholds.append(thr)
        self.history.append(cloud.intensity[labels.snow].astype(np.float64))
        return labels


def dlior(scans: Iterable[PointCloud], lior_cfg: LIORConfig, cfg: DLIORConfig) -> Iterator[LabelSet]:
    state = DLIOR(lior_cfg, cfg)
    for cloud in scans:
        yield state(cloud)


FILTERS = ("ror", "sor", "dror", "lior", "dlior")


def run_filter(name: str, cloud: PointCloud, cfg: FilterConfig) -> LabelSet:
    """Dispatch a single-scan filter by name (``dlior`` runs as a one-scan stream)."""
    if name == "ror":
        return ror(cloud, cfg.ror)
    if name == "sor":
        return sor(cloud, cfg.sor)
    if name == "dror":
        return dror(cloud, cfg.dror)
    if name == "lior":
        return lior(cloud, cfg.lior)
    if name == "dlior":
        return DLIOR(cfg.lior, cfg.dlior)(cloud)
    raise ValueError(f"unknown filter {name!r}; expected one of {', '.join(FILTERS)}")
