"""Deterministic synthetic snowy scans with exact ground truth.

Surfaces (a finite ground disc and axis-aligned boxes) are sampled by ray
casting one beam per range-image pixel, so object returns are locally dense.
Snow flakes are dropped onto random beams in front of whatever the beam
would otherwise hit: they are sparse in space, dim, and have zero
reflectivity. In ``separable`` mode every flake is re-checked against the
pseudo-label rules and resampled until it would pass all four conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import PointCloud, SensorMeta
from .pseudolabel import PseudoLabelConfig, intensity_threshold
from . import pseudolabel


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    intensity: tuple = (20.0, 200.0)
    reflectivity: tuple = (0.1, 1.0)


@dataclass(frozen=True)
class SceneParams:
    seed: int = 0
    meta: SensorMeta = field(default_factory=lambda: SensorMeta(
        channels=16, horiz_steps=256, fov_up_deg=15.0, fov_down_deg=-15.0, max_range_m=120.0))
    ground_extent_m: float = 90.0
    ground_intensity: tuple = (8.0, 60.0)
    ground_reflectivity: tuple = (0.05, 0.5)
    boxes: Optional[tuple] = None
    n_near_boxes: int = 6
    n_far_boxes: int = 5
    object_intensity: tuple = (5.0, 220.0)
    object_reflectivity: tuple = (0.1, 1.0)
    snow_count: int = 150
    snow_range_m: tuple = (1.5, 25.0)
    snow_intensity_frac: tuple = (0.0, 0.8)
    snow_reflectivity: float = 0.0
    range_noise_m: float = 0.01
    dropout: float = 0.02
    separable: bool = True
    overlap_frac: float = 0.3
    max_rounds: int = 8
    pseudolabel: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)

    def __post_init__(self):
        if self.snow_count < 0:
            raise ValueError("snow_count must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.object_reflectivity[0] <= self.pseudolabel.reflectivity_eps:
            raise ValueError("object reflectivity must stay above reflectivity_eps")
        if self.snow_reflectivity > self.pseudolabel.reflectivity_eps and self.separable:
            raise ValueError("separable scenes need snow reflectivity within reflectivity_eps")


def beam_directions(meta: SensorMeta) -> np.ndarray:
    """Unit vectors through the centre of every pixel, shape (H, W, 3)."""
    h, w = meta.channels, meta.horiz_steps
    up, down = np.deg2rad(meta.fov_up_deg), np.deg2rad(meta.fov_down_deg)
    el = up - (np.arange(h) + 0.5) * (up - down) / h
    az = -np.pi + (np.arange(w) + 0.5) * 2 * np.pi / w
    el, az = np.meshgrid(el, az, indexing="ij")
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def random_boxes(rng, p: SceneParams) -> list[Box]:
    ground = -p.meta.mount_height_m
    boxes = []
    for _ in range(p.n_near_boxes):
        d, a = rng.uniform(6.0, 25.0), rng.uniform(-np.pi, np.pi)
        size = (rng.uniform(1.5, 5.0), rng.uniform(1.5, 5.0), rng.uniform(1.2, 3.0))
        boxes.append(Box((d * np.cos(a), d * np.sin(a), ground + size[2] / 2), size,
                         p.object_intensity, p.object_reflectivity))
    for _ in range(p.n_far_boxes):
        d, a = rng.uniform(30.0, 85.0), rng.uniform(-np.pi, np.pi)
        size = (rng.uniform(5.0, 20.0), rng.uniform(5.0, 20.0), rng.uniform(6.0, 25.0))
        boxes.append(Box((d * np.cos(a), d * np.sin(a), ground + size[2] / 2), size,
                         p.object_intensity, p.object_reflectivity))
    return boxes


def _ray_box(dirs, box: Box):
    """Entry distance along each ray into an axis-aligned box (inf on miss)."""
    c, s = np.asarray(box.center, float), np.asarray(box.size, float) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (c - s) * inv
        t2 = (c + s) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    t_near = np.minimum(t1, t2).max(axis=-1)
    t_far = np.maximum(t1, t2).min(axis=-1)
    hit = (t_far >= np.maximum(t_near, 0)) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _background(rng, p: SceneParams, dirs):
    """Per-beam surface range, intensity and reflectivity (range inf = no return)."""
    h = p.meta.mount_height_m
    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[..., 2] < 0, -h / dirs[..., 2], np.inf)
    horiz = t_ground * np.hypot(dirs[..., 0], dirs[..., 1])
    t_ground = np.where(horiz <= p.ground_extent_m, t_ground, np.inf)
    rng_m = t_ground.copy()
    inten = rng.uniform(*p.ground_intensity, size=rng_m.shape)
    refl = rng.uniform(*p.ground_reflectivity, size=rng_m.shape)
    boxes = list(p.boxes) if p.boxes is not None else random_boxes(rng, p)
    for box in boxes:
        t = _ray_box(dirs, box)
        closer = t < rng_m
        base = rng.uniform(*box.intensity)
        rng_m = np.where(closer, t, rng_m)
        noise = rng.uniform(0.7, 1.3, size=rng_m.shape)
        inten = np.where(closer, np.clip(base * noise, 0.0, None), inten)
        refl = np.where(closer, rng.uniform(*box.reflectivity, size=rng_m.shape), refl)
    rng_m = np.where(rng_m <= p.meta.max_range_m, rng_m, np.inf)
    noise = rng.normal(0.0, p.range_noise_m, size=rng_m.shape)
    rng_m = np.where(np.isfinite(rng_m), np.maximum(rng_m + noise, 0.1), np.inf)
    drop = rng.random(rng_m.shape) < p.dropout
    rng_m[drop] = np.inf
    return rng_m, inten, refl


def _draw_flake(rng, p: SceneParams, dirs, bg_range, taken):
    """Pick a free beam and a range in front of its surface; None if it fails."""
    h, w = bg_range.shape
    lo, hi = p.snow_range_m
    ground = -p.meta.mount_height_m
    clearance = p.pseudolabel.r_min + 0.3
    for _ in range(50):
        r, c = int(rng.integers(h)), int(rng.integers(w))
        if taken[max(r - 2, 0):r + 3, max(c - 2, 0):c + 3].any():
            continue
        top = min(hi, bg_range[r, c] - clearance) if p.separable else min(hi, bg_range[r, c])
        if top <= lo:
            continue
        d = rng.uniform(lo, top)
        z = d * dirs[r, c, 2]
        if p.separable and z <= ground + clearance:
            continue
        return r, c, d
    return None


def _flake_photometry(rng, p: SceneParams, d):
    thr = intensity_threshold(d, p.pseudolabel)
    frac = rng.uniform(*p.snow_intensity_frac)
    refl = p.snow_reflectivity
    if not p.separable and rng.random() < p.overlap_frac:
        frac = rng.uniform(1.0, 2.0)
        refl = rng.uniform(*p.object_reflectivity)
    return thr * frac, refl


def _assemble(p, dirs, bg, flakes):
    bg_range, bg_int, bg_refl = bg
    rng_m, inten, refl = bg_range.copy(), bg_int.copy(), bg_refl.copy()
    snow = np.zeros(bg_range.shape, dtype=bool)
    for (r, c), (d, i, f) in flakes.items():
        rng_m[r, c], inten[r, c], refl[r, c] = d, i, f
        snow[r, c] = True
    keep = np.isfinite(rng_m).reshape(-1)
    xyz = (dirs * np.where(np.isfinite(rng_m), rng_m, 0.0)[..., None]).reshape(-1, 3)[keep]
    cloud = PointCloud(xyz, inten.reshape(-1)[keep], refl.reshape(-1)[keep],
                       meta=p.meta, gt_labels=snow.reshape(-1)[keep].astype(np.uint8))
    pix = np.flatnonzero(keep)
    return cloud, pix


def generate_scene(params: SceneParams) -> PointCloud:
    """Build one scan; ``gt_labels`` marks the snow returns."""
    p = params
    rng = np.random.default_rng(p.seed)
    dirs = beam_directions(p.meta)
    bg = _background(rng, p, dirs)
    taken = np.zeros(bg[0].shape, dtype=bool)
    flakes = {}

    def add_flakes(n):
        for _ in range(n):
            got = _draw_flake(rng, p, dirs, bg[0], taken)
            if got is None:
                continue
            r, c, d = got
            inten, refl = _flake_photometry(rng, p, d)
            flakes[(r, c)] = (d, inten, refl)
            taken[r, c] = True

    add_flakes(p.snow_count)
    cloud, pix = _assemble(p, dirs, bg, flakes)
    if not p.separable:
        return cloud
    width = p.meta.horiz_steps
    rounds = 0
    while True:
        trace = pseudolabel.run(cloud, p.pseudolabel)
        missed = (cloud.gt_labels == 1) & ~trace.stages["cond4"]
        if not missed.any():
            return cloud
        for flat in pix[missed]:
            del flakes[(int(flat // width), int(flat % width))]
        # resample for a few rounds, then only drop until the scene is clean
        if rounds < p.max_rounds:
            add_flakes(int(missed.sum()))
        rounds += 1
        cloud, pix = _assemble(p, dirs, bg, flakes)


def generate_many(base: SceneParams, count: int, first_seed: int = 0) -> list[PointCloud]:
    return [generate_scene(replace(base, seed=first_seed + k)) for k in range(count)]
