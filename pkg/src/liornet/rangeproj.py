"""Spherical projection of scans into 3-channel range images and back."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .core import PointCloud, spherical

CHANNELS = ("range", "intensity", "reflectivity")
BLOB_MAGIC = b"RIMG"
BLOB_VERSION = 1


class OverflowPolicy(str, Enum):
    INHERIT = "inherit"
    CLEAR = "clear"


@dataclass(frozen=True, eq=False)
class RangeImage:
    """H x W projection of a scan.

    ``index_map`` holds -1 where no point landed. ``point_pixel`` gives, for
    every point, the flat pixel it projected to (the winning pixel for placed
    points, the occluding pixel for overflow points). Points that lost a pixel
    collision are listed in ``overflow``; points whose elevation fell outside
    the vertical field of view and were clamped to an edge row are listed in
    ``clamped`` (they may be placed or in overflow).
    """

    height: int
    width: int
    range_ch: np.ndarray
    intensity_ch: np.ndarray
    reflectivity_ch: np.ndarray
    index_map: np.ndarray
    valid: np.ndarray
    point_pixel: np.ndarray
    overflow: np.ndarray
    clamped: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.point_pixel)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def channels(self) -> np.ndarray:
        """Raw channels stacked as (3, H, W)."""
        return np.stack([self.range_ch, self.intensity_ch, self.reflectivity_ch])

    def placed(self) -> np.ndarray:
        return self.index_map[self.valid]

    def gather(self, per_point, fill=0.0) -> np.ndarray:
        """Scatter a per-point array onto the image (placed points only)."""
        per_point = np.asarray(per_point)
        out = np.full(self.shape, fill, dtype=np.result_type(per_point.dtype, np.asarray(fill).dtype))
        out[self.valid] = per_point[self.index_map[self.valid]]
        return out


def pixel_coords(cloud: PointCloud, height: int, width: int):
    """Row/column of every point plus a flag for vertical-FOV clamping."""
    meta = cloud.meta
    rng, az, el = spherical(cloud.xyz)
    fov_up = np.deg2rad(meta.fov_up_deg)
    fov = fov_up - np.deg2rad(meta.fov_down_deg)
    row_f = np.floor((fov_up - el) / fov * height)
    col_f = np.floor((az + np.pi) / (2 * np.pi) * width)
    clamped = (row_f < 0) | (row_f > height - 1)
    rows = np.clip(row_f, 0, height - 1).astype(np.int64)
    cols = np.clip(col_f, 0, width - 1).astype(np.int64)
    return rng, rows, cols, clamped


def project(cloud: PointCloud, height: int | None = None, width: int | None = None) -> RangeImage:
    """Project a cloud; on pixel collisions the nearest point wins (ties: lower index)."""
    height = cloud.meta.channels if height is None else int(height)
    width = cloud.meta.horiz_steps if width is None else int(width)
    if height < 1 or width < 1:
        raise ValueError("image height and width must be >= 1")
    n = len(cloud)
    rng, rows, cols, clamped = pixel_coords(cloud, height, width)
    flat = rows * width + cols
    index_map = np.full(height * width, -1, dtype=np.int64)
    overflow = np.zeros(0, dtype=np.int64)
    if n:
        idx = np.arange(n)
        # zero-range returns never claim a pixel
        order = np.lexsort((idx, rng, rng == 0, flat))
        sorted_flat = flat[order]
        first = np.ones(n, dtype=bool)
        first[1:] = sorted_flat[1:] != sorted_flat[:-1]
        winners = order[first & (rng[order] > 0)]
        index_map[flat[winners]] = winners
        is_winner = np.zeros(n, dtype=bool)
        is_winner[winners] = True
        overflow = np.flatnonzero(~is_winner)
    index_map = index_map.reshape(height, width)
    valid = index_map >= 0
    safe = np.where(valid, index_map, 0)

    def channel(values):
        return np.where(valid, np.asarray(values, dtype=np.float64)[safe] if n else 0.0, 0.0)

    return RangeImage(
        height=height,
        width=width,
        range_ch=channel(rng),
        intensity_ch=channel(cloud.intensity),
        reflectivity_ch=channel(cloud.reflectivity),
        index_map=index_map,
        valid=valid,
        point_pixel=flat.astype(np.int64),
        overflow=overflow,
        clamped=np.flatnonzero(clamped),
    )


def unproject_mask(img: RangeImage, pixel_mask, threshold: float | None = None,
                   overflow_policy: OverflowPolicy | str = OverflowPolicy.INHERIT) -> np.ndarray:
    """Carry per-pixel values back to every point of the projected cloud.

    Placed points read their own pixel. Overflow points read their occluder's
    pixel under INHERIT (0 if that pixel is empty) and get 0 under CLEAR.
    With ``threshold`` set the result is binarised (``value >= threshold``).
    """
    pixel_mask = np.asarray(pixel_mask, dtype=np.float64)
    if pixel_mask.shape != img.shape:
        raise ValueError(f"mask shape {pixel_mask.shape} does not match image shape {img.shape}")
    if threshold is not None and not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    policy = OverflowPolicy(overflow_policy)
    flat_mask = np.where(img.valid, pixel_mask, 0.0).reshape(-1)
    out = flat_mask[img.point_pixel] if img.n_points else np.zeros(0)
    if policy is OverflowPolicy.CLEAR and len(img.overflow):
        out[img.overflow] = 0.0
    if threshold is not None:
        return (out >= threshold).astype(np.uint8)
    return out


@dataclass(frozen=True)
class ChannelStats:
    mode: str
    a: tuple[float, float, float]
    b: tuple[float, float, float]


def channel_stats(img: RangeImage, mode: str = "standard") -> ChannelStats:
    """Per-channel mean/std (``standard``) or min/max (``minmax``) over valid pixels."""
    ch = img.channels[:, img.valid]
    if mode == "standard":
        if ch.shape[1] == 0:
            return ChannelStats(mode, (0.0,) * 3, (0.0,) * 3)
        return ChannelStats(mode, tuple(ch.mean(axis=1)), tuple(ch.std(axis=1)))
    if mode == "minmax":
        if ch.shape[1] == 0:
            return ChannelStats(mode, (0.0,) * 3, (0.0,) * 3)
        return ChannelStats(mode, tuple(ch.min(axis=1)), tuple(ch.max(axis=1)))
    raise ValueError(f"unknown normalisation mode {mode!r}")


def normalize_channels(img: RangeImage, stats: ChannelStats | None = None):
    """Normalise the three channels to a (3, H, W) float64 array.

    Returns ``(array, degenerate)`` where ``degenerate`` names channels whose
    spread was zero; those are centred but left unscaled. Invalid pixels are 0.
    """
    stats = stats or channel_stats(img)
    ch = img.channels.astype(np.float64)
    out = np.zeros_like(ch)
    degenerate = []
    for c in range(3):
        if stats.mode == "standard":
            shift, scale = stats.a[c], stats.b[c]
        else:
            shift, scale = stats.a[c], stats.b[c] - stats.a[c]
        if not scale > 0:
            degenerate.append(CHANNELS[c])
            scale = 1.0
        out[c] = np.where(img.valid, (ch[c] - shift) / scale, 0.0)
    return out, tuple(degenerate)


def write_image_blob(img: RangeImage, path) -> None:
    """Debug export: header (magic, version, H, W, channel names) + float32 C x H x W."""
    names = ",".join(CHANNELS).encode()
    header = BLOB_MAGIC + struct.pack("<IIIH", BLOB_VERSION, img.height, img.width, len(names)) + names
    Path(path).write_bytes(header + img.channels.astype("<f4").tobytes())


def read_image_blob(path) -> tuple[tuple[str, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != BLOB_MAGIC:
        raise ValueError(f"{path}: not a range image blob")
    version, h, w, nlen = struct.unpack_from("<IIIH", raw, 4)
    if version != BLOB_VERSION:
        raise ValueError(f"{path}: unsupported blob version {version}")
    start = 4 + struct.calcsize("<IIIH")
    names = tuple(raw[start:start + nlen].decode().split(","))
    data = np.frombuffer(raw, dtype="<f4", offset=start + nlen).reshape(len(names), h, w)
    return names, data
