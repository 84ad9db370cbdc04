"""Rule-based clean-up of predicted snow using sensing geometry."""

from __future__ import annotations

import numpy as np

from .core import SNOW_SENSE_LIMIT_M, PointCloud, beyond_limit, on_or_below

# Two limits appear in practice: the theoretical snow sensing distance and a
# tighter empirically tuned range.
PRESETS = {"theoretical": SNOW_SENSE_LIMIT_M, "optimal": 20.0}


def apply(labels, cloud: PointCloud, limit_m: float = SNOW_SENSE_LIMIT_M,
          ground_margin_m: float = 0.0, threshold: float = 0.5) -> np.ndarray:
    """Flip snow verdicts that are physically implausible back to non-snow.

    ``labels`` may be binary or probabilities (binarised at ``threshold``).
    Snow beyond ``limit_m`` or at/below ``-(mount_height - ground_margin_m)``
    becomes 0; nothing is ever flipped to snow.
    """
    labels = np.asarray(labels)
    if labels.shape != (len(cloud),):
        raise ValueError(f"got {labels.size} labels for {len(cloud)} points")
    if not limit_m > 0:
        raise ValueError("limit_m must be positive")
    snow = labels >= threshold if labels.dtype.kind == "f" else labels.astype(bool)
    implausible = beyond_limit(cloud.ranges(), limit_m) | on_or_below(
        cloud.xyz[:, 2], -(cloud.meta.mount_height_m - ground_margin_m))
    return (snow & ~implausible).astype(np.uint8)
