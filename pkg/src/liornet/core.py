"""Domain types, coordinate math and binary scan/label I/O.

Scan files are packed little-endian float32 records, either XYZI
(x, y, z, intensity) or XYZIR (x, y, z, intensity, reflectivity).
Label files are packed little-endian uint32 codes, one per point.
Provenance sidecars are uint8 codes, one per point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

import numpy as np

SNOW_SENSE_LIMIT_M = 71.235

SCAN_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
PROVENANCE_DTYPE = np.dtype("u1")

RECORD_FIELDS = {"xyzi": 4, "xyzir": 5}


class ScanFormatError(ValueError):
    """Raised when a scan file cannot be decoded."""


class Provenance(IntEnum):
    NONE = 0
    PRE_RANGE = 1
    PRE_GROUND = 2
    COND1_SNOW = 3
    COND2_OBJ = 4
    COND3_OBJ = 5
    COND4_OBJ = 6


@dataclass(frozen=True)
class SensorMeta:
    """Static description of the LiDAR and its mounting.

    The sensor frame is z-up with the origin at the sensor, so the ground
    plane sits at ``z = -mount_height_m``.
    """

    mount_height_m: float = 1.8
    channels: int = 64
    horiz_steps: int = 1024
    fov_up_deg: float = 16.6
    fov_down_deg: float = -16.6
    max_range_m: float = 120.0
    snow_sense_limit_m: float = SNOW_SENSE_LIMIT_M

    def __post_init__(self):
        if self.channels < 1 or self.horiz_steps < 1:
            raise ValueError("channels and horiz_steps must be >= 1")
        if not self.fov_up_deg > self.fov_down_deg:
            raise ValueError("fov_up_deg must exceed fov_down_deg")
        if not 0 < self.snow_sense_limit_m <= self.max_range_m:
            raise ValueError("need 0 < snow_sense_limit_m <= max_range_m")
        if not self.mount_height_m > 0:
            raise ValueError("mount_height_m must be positive")

    @property
    def ground_z(self) -> float:
        return -self.mount_height_m


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0
    reflectivity: float = 0.0


@dataclass(frozen=True, eq=False)
class PointCloud:
    """A scan stored column-wise as float32 arrays.

    Arrays are kept read-only so a cloud can be shared freely.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    reflectivity: np.ndarray
    meta: SensorMeta = field(default_factory=SensorMeta)
    gt_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=SCAN_DTYPE).reshape(-1, 3)
        n = len(xyz)
        intensity = np.ascontiguousarray(self.intensity, dtype=SCAN_DTYPE).reshape(-1)
        reflectivity = np.ascontiguousarray(self.reflectivity, dtype=SCAN_DTYPE).reshape(-1)
        if len(intensity) != n or len(reflectivity) != n:
            raise ValueError("intensity/reflectivity length must match point count")
        if not np.isfinite(xyz).all():
            raise ValueError("point coordinates must be finite")
        if (intensity < 0).any() or (reflectivity < 0).any():
            raise ValueError("intensity and reflectivity must be >= 0")
        gt = self.gt_labels
        if gt is not None:
            gt = np.ascontiguousarray(gt, dtype=np.uint8).reshape(-1)
            if len(gt) != n:
                raise ValueError(f"gt_labels has {len(gt)} entries for {n} points")
            gt.flags.writeable = False
        for arr in (xyz, intensity, reflectivity):
            arr.flags.writeable = False
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", intensity)
        object.__setattr__(self, "reflectivity", reflectivity)
        object.__setattr__(self, "gt_labels", gt)

    @classmethod
    def from_points(cls, points: Iterable[Point], meta: SensorMeta | None = None,
                    gt_labels=None) -> "PointCloud":
        rows = np.array([tuple(p) for p in points], dtype=np.float64).reshape(-1, 5)
        return cls(rows[:, :3], rows[:, 3], rows[:, 4],
                   meta=meta or SensorMeta(), gt_labels=gt_labels)

    @classmethod
    def empty(cls, meta: SensorMeta | None = None) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), meta=meta or SensorMeta())

    def __len__(self) -> int:
        return len(self.xyz)

    def __getitem__(self, i: int) -> Point:
        x, y, z = (float(v) for v in self.xyz[i])
        return Point(x, y, z, float(self.intensity[i]), float(self.reflectivity[i]))

    @property
    def points(self) -> list[Point]:
        return [self[i] for i in range(len(self))]

    def ranges(self) -> np.ndarray:
        """Euclidean range of every point in float64."""
        return spherical(self.xyz)[0]

    def with_labels(self, gt_labels) -> "PointCloud":
        return PointCloud(self.xyz, self.intensity, self.reflectivity, self.meta, gt_labels)

    def same_as(self, other: "PointCloud") -> bool:
        """Bit-exact comparison of point data and labels."""
        if len(self) != len(other):
            return False
        if (self.gt_labels is None) != (other.gt_labels is None):
            return False
        same = (self.xyz.tobytes() == other.xyz.tobytes()
                and self.intensity.tobytes() == other.intensity.tobytes()
                and self.reflectivity.tobytes() == other.reflectivity.tobytes())
        if self.gt_labels is not None:
            same = same and np.array_equal(self.gt_labels, other.gt_labels)
        return same


@dataclass(frozen=True, eq=False)
class LabelSet:
    """Per-point binary snow labels plus the code of the stage that decided them."""

    labels: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8).reshape(-1)
        prov = np.ascontiguousarray(self.provenance, dtype=PROVENANCE_DTYPE).reshape(-1)
        if len(labels) != len(prov):
            raise ValueError("labels and provenance lengths differ")
        if ((labels == 1) & (prov != Provenance.COND1_SNOW)).any():
            raise ValueError("snow labels must carry COND1_SNOW provenance")
        labels.flags.writeable = False
        prov.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "provenance", prov)

    @classmethod
    def from_mask(cls, snow) -> "LabelSet":
        """Wrap a plain snow mask; snow points get the snow verdict code."""
        snow = np.asarray(snow, dtype=bool)
        prov = np.where(snow, Provenance.COND1_SNOW, Provenance.NONE)
        return cls(snow.astype(np.uint8), prov)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def snow(self) -> np.ndarray:
        return self.labels.astype(bool)


def to_spherical(p: Point) -> tuple[float, float, float]:
    """Return (range_m, azimuth_rad, elevation_rad) with azimuth in [-pi, pi)."""
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    rng = math.sqrt(x * x + y * y + z * z)
    if rng == 0.0:
        return 0.0, 0.0, 0.0
    az = math.atan2(y, x)
    if az >= math.pi:
        az -= 2 * math.pi
    el = math.asin(max(-1.0, min(1.0, z / rng)))
    return rng, az, el


def spherical(xyz) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`to_spherical` over an (N, 3) array, in float64."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rng = np.sqrt(x * x + y * y + z * z)
    az = np.arctan2(y, x)
    az = np.where(az >= np.pi, az - 2 * np.pi, az)
    with np.errstate(invalid="ignore", divide="ignore"):
        el = np.arcsin(np.clip(np.where(rng > 0, z / rng, 0.0), -1.0, 1.0))
    zero = rng == 0
    az = np.where(zero, 0.0, az)
    el = np.where(zero, 0.0, el)
    return rng, az, el


def beyond_limit(range_m, limit_m) -> np.ndarray:
    """``range > limit`` judged at float32 storage precision.

    Coordinates are stored as float32, so a point written at the limit reads
    back a hair off it; rounding both sides keeps it on the boundary.
    """
    return np.asarray(range_m, dtype=np.float64).astype(np.float32) > np.float32(limit_m)


def on_or_below(z, level_m) -> np.ndarray:
    """``z <= level`` at float32 storage precision, like :func:`beyond_limit`."""
    return np.asarray(z, dtype=np.float64).astype(np.float32) <= np.float32(level_m)


def from_spherical(rng, az, el) -> np.ndarray:
    rng, az, el = (np.asarray(a, dtype=np.float64) for a in (rng, az, el))
    cos_el = np.cos(el)
    return np.stack([rng * cos_el * np.cos(az), rng * cos_el * np.sin(az), rng * np.sin(el)], axis=-1)


def read_scan(path, fmt: str = "xyzir", meta: SensorMeta | None = None) -> PointCloud:
    """Load a packed float32 scan. XYZI files reuse intensity as reflectivity."""
    fmt = fmt.lower()
    if fmt not in RECORD_FIELDS:
        raise ValueError(f"unknown scan format {fmt!r}; expected one of {sorted(RECORD_FIELDS)}")
    nfields = RECORD_FIELDS[fmt]
    raw = Path(path).read_bytes()
    rec = nfields * SCAN_DTYPE.itemsize
    if len(raw) % rec:
        offset = (len(raw) // rec) * rec
        raise ScanFormatError(f"{path}: truncated at offset {offset} ({len(raw)} bytes, "
                              f"{rec}-byte {fmt.upper()} records)")
    data = np.frombuffer(raw, dtype=SCAN_DTYPE).reshape(-1, nfields)
    refl = data[:, 4] if nfields == 5 else data[:, 3]
    return PointCloud(data[:, :3], data[:, 3], refl, meta=meta or SensorMeta())


def write_scan(cloud: PointCloud, path, fmt: str = "xyzir") -> None:
    fmt = fmt.lower()
    cols = [cloud.xyz, cloud.intensity[:, None]]
    if fmt == "xyzir":
        cols.append(cloud.reflectivity[:, None])
    elif fmt != "xyzi":
        raise ValueError(f"unknown scan format {fmt!r}")
    Path(path).write_bytes(np.hstack(cols).astype(SCAN_DTYPE).tobytes())


def read_label_codes(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % LABEL_DTYPE.itemsize:
        raise ScanFormatError(f"{path}: truncated at offset {len(raw) // 4 * 4}")
    return np.frombuffer(raw, dtype=LABEL_DTYPE).copy()


def read_labels(path, snow_ids: Iterable[int]) -> np.ndarray:
    """Map raw uint32 codes to binary snow labels (1 iff code in ``snow_ids``).

    The point count is ``len`` of the result; checking it against the paired
    scan is the caller's job.
    """
    codes = read_label_codes(path)
    ids = np.fromiter((int(s) for s in snow_ids), dtype=np.int64)
    return np.isin(codes, ids).astype(np.uint8)


def write_labels(labels, path) -> None:
    Path(path).write_bytes(np.asarray(labels).astype(LABEL_DTYPE).tobytes())


def write_provenance(provenance, path) -> None:
    Path(path).write_bytes(np.asarray(provenance).astype(PROVENANCE_DTYPE).tobytes())


def read_provenance(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=PROVENANCE_DTYPE).copy()
