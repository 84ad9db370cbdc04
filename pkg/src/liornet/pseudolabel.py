"""Physics-guided pseudo-labels for snow.

Preprocessing removes points beyond the snow sensing limit and at or below
the ground plane from snow candidacy, then four conditions refine the
candidate set in order:

1. intensity at or under a range-dependent threshold,
2. (near-)zero reflectivity,
3. not on a range-image edge,
4. sparse neighbourhood under a range-dependent radius and count.

Survivors of all four are the final snow set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import LabelSet, PointCloud, Provenance, beyond_limit, on_or_below
from .rangeproj import RangeImage, project
from .spatialindex import NeighborIndex

# Sobel pairs: (row offset, weight); horizontal pairs compare columns c+1 and
# c-1 in rows r-1, r, r+1 and vertical pairs compare rows r+1 and r-1.
SOBEL_WEIGHTS = ((-1, 1.0), (0, 2.0), (1, 1.0))


@dataclass(frozen=True)
class PseudoLabelConfig:
    I0: float = 30.0
    d0: float = 10.0
    exponent: float = 1.0
    I_min: float = 2.0
    reflectivity_eps: float = 0.0
    grad_threshold_base: float = 4.0
    range_weighting_gain: float = 0.1
    dilation_px: int = 0
    r_min: float = 0.3
    radius_gain: float = 0.05
    n_min: int = 2
    density_a: float = 20.0
    snow_sense_limit_m: Optional[float] = None
    ground_margin_m: float = 0.0

    def __post_init__(self):
        if not (self.I0 > 0 and self.d0 > 0):
            raise ValueError("I0 and d0 must be positive")
        if self.exponent < 0 or self.I_min < 0:
            raise ValueError("exponent and I_min must be >= 0")
        if self.reflectivity_eps < 0 or self.dilation_px < 0:
            raise ValueError("reflectivity_eps and dilation_px must be >= 0")
        if not self.r_min > 0 or self.n_min < 1:
            raise ValueError("need r_min > 0 and n_min >= 1")


def intensity_threshold(range_m, cfg: PseudoLabelConfig):
    """``max(I_min, I0 * (d0 / range)^exponent)``; scalar in, scalar out."""
    r = np.asarray(range_m, dtype=np.float64)
    if (r <= 0).any():
        raise ValueError("range must be positive for the intensity threshold")
    thr = np.maximum(cfg.I_min, cfg.I0 * (cfg.d0 / r) ** cfg.exponent)
    return float(thr) if thr.ndim == 0 else thr


def density_radius(range_m, cfg: PseudoLabelConfig) -> np.ndarray:
    return np.maximum(cfg.r_min, cfg.radius_gain * np.asarray(range_m, dtype=np.float64))


def density_count_threshold(range_m, cfg: PseudoLabelConfig) -> np.ndarray:
    """``max(n_min, round(a / d))`` with half-up rounding."""
    d = np.maximum(np.asarray(range_m, dtype=np.float64), 1e-9)
    return np.maximum(cfg.n_min, np.floor(cfg.density_a / d + 0.5)).astype(np.int64)


def _safe_range(rng):
    return np.maximum(rng, 1e-9)


def preprocess(cloud: PointCloud, cfg: PseudoLabelConfig):
    """Return ``(eligible, provenance)``; range exclusion takes precedence."""
    meta = cloud.meta
    limit = meta.snow_sense_limit_m if cfg.snow_sense_limit_m is None else cfg.snow_sense_limit_m
    rng = cloud.ranges()
    z = cloud.xyz[:, 2].astype(np.float64)
    too_far = beyond_limit(rng, limit)
    ground = ~too_far & on_or_below(z, -(meta.mount_height_m - cfg.ground_margin_m))
    prov = np.full(len(cloud), Provenance.NONE, dtype=np.uint8)
    prov[too_far] = Provenance.PRE_RANGE
    prov[ground] = Provenance.PRE_GROUND
    return ~(too_far | ground), prov


def cond1_intensity(cloud: PointCloud, cfg: PseudoLabelConfig, eligible) -> np.ndarray:
    rng = _safe_range(cloud.ranges())
    thr = np.maximum(cfg.I_min, cfg.I0 * (cfg.d0 / rng) ** cfg.exponent)
    return np.asarray(eligible, dtype=bool) & (cloud.intensity.astype(np.float64) <= thr)


def cond2_reflectivity(cloud: PointCloud, candidates, cfg: PseudoLabelConfig) -> np.ndarray:
    refl = np.abs(cloud.reflectivity.astype(np.float64))
    return np.asarray(candidates, dtype=bool) & (refl <= cfg.reflectivity_eps)


def range_gradient(range_ch, valid) -> np.ndarray:
    """Sobel magnitude of the range channel using only pairs of valid pixels.

    Pixels outside the image count as invalid; there is no azimuth wrap.
    """
    h, w = range_ch.shape
    R = np.zeros((h + 2, w + 2))
    V = np.zeros((h + 2, w + 2), dtype=bool)
    R[1:-1, 1:-1] = range_ch
    V[1:-1, 1:-1] = valid

    def at(dr, dc):
        return R[1 + dr:1 + dr + h, 1 + dc:1 + dc + w], V[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]

    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for off, wgt in SOBEL_WEIGHTS:
        (ra, va), (rb, vb) = at(off, 1), at(off, -1)
        gx += np.where(va & vb, wgt * (ra - rb), 0.0)
        (ra, va), (rb, vb) = at(1, off), at(-1, off)
        gy += np.where(va & vb, wgt * (ra - rb), 0.0)
    return np.hypot(gx, gy)


def edge_map(img: RangeImage, cfg: PseudoLabelConfig) -> np.ndarray:
    """Boolean edge mask: range-weighted gradient threshold, then dilation."""
    grad = range_gradient(img.range_ch, img.valid)
    limit = cfg.grad_threshold_base * (1.0 + cfg.range_weighting_gain * img.range_ch)
    edges = img.valid & (grad > limit)
    if cfg.dilation_px > 0 and edges.any():
        size = 2 * cfg.dilation_px + 1
        edges = ndimage.binary_dilation(edges, structure=np.ones((size, size), dtype=bool))
    return edges


def cond3_edge(candidates, img: RangeImage, edges) -> np.ndarray:
    """Drop candidates whose pixel (their occluder's, for overflow points) is an edge."""
    candidates = np.asarray(candidates, dtype=bool)
    on_edge = np.asarray(edges, dtype=bool).reshape(-1)[img.point_pixel] if len(candidates) else candidates
    return candidates & ~on_edge


def cond4_density(cloud: PointCloud, candidates, index: NeighborIndex,
                  cfg: PseudoLabelConfig) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=bool)
    idx = np.flatnonzero(candidates)
    if len(idx) == 0:
        return candidates
    rng = cloud.ranges()[idx]
    counts = index.radius_counts(density_radius(rng, cfg), members=idx)
    out = candidates.copy()
    out[idx[counts >= density_count_threshold(rng, cfg)]] = False
    return out


@dataclass(frozen=True, eq=False)
class PseudoLabelTrace:
    """Every intermediate product of :func:`run`; ``stages`` are snow masks."""

    labels: LabelSet
    eligible: np.ndarray
    stages: dict = field(repr=False)
    image: RangeImage = field(repr=False)
    edges: np.ndarray = field(repr=False)


def run(cloud: PointCloud, cfg: PseudoLabelConfig, image: RangeImage | None = None,
        index: NeighborIndex | None = None) -> PseudoLabelTrace:
    img = image if image is not None else project(cloud)
    eligible, prov = preprocess(cloud, cfg)
    c1 = cond1_intensity(cloud, cfg, eligible)
    c2 = cond2_reflectivity(cloud, c1, cfg)
    edges = edge_map(img, cfg)
    c3 = cond3_edge(c2, img, edges)
    c4 = cond4_density(cloud, c3, index or NeighborIndex(cloud.xyz), cfg)
    prov[c1] = Provenance.COND1_SNOW
    prov[c1 & ~c2] = Provenance.COND2_OBJ
    prov[c2 & ~c3] = Provenance.COND3_OBJ
    prov[c3 & ~c4] = Provenance.COND4_OBJ
    labels = LabelSet(c4.astype(np.uint8), prov)
    stages = {"cond1": c1, "cond2": c2, "cond3": c3, "cond4": c4}
    return PseudoLabelTrace(labels, eligible, stages, img, edges)


def generate(cloud: PointCloud, cfg: PseudoLabelConfig) -> LabelSet:
    """Pseudo-label a scan: preprocessing then Conditions 1-4 in order."""
    return run(cloud, cfg).labels
