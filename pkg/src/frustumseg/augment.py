"""Frustum-aware augmentations and the standard global point transforms.

FrustumMix swaps complementary frustum strips between two labeled scans:
either alternating row bands (inclination) or one half-width column band
(azimuth), the branch picked by a seeded coin flip. Range-Interpolation
synthesizes points at empty range-image pixels whose two direction
neighbors are both occupied, averaging the neighbor records; interpolated
points inherit the shared neighbor label or the ignore label on
disagreement. All randomness flows through the pinned xorshift64* stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DataError
from .geometry import build_range_image, project
from .rng import Xorshift64Star
from .scan_io import PointCloud, SensorConfig

MODE_COIN = "coin"
MODE_INCLINATION = "inclination"
MODE_AZIMUTH = "azimuth"


@dataclass(frozen=True)
class MixSpec:
    """FrustumMix parameters; mode 'coin' draws the direction per scan pair."""

    mode: str = MODE_COIN
    num_areas_choices: Tuple[int, ...] = (3, 4, 5, 6)
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in (MODE_COIN, MODE_INCLINATION, MODE_AZIMUTH):
            raise DataError(f"unknown mix mode '{self.mode}'")
        if not self.num_areas_choices:
            raise DataError("num_areas_choices must not be empty")
        if any(n < 2 for n in self.num_areas_choices):
            raise DataError("num_areas_choices entries must be at least 2")


def _take(cloud: PointCloud, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return cloud.xyz[mask], cloud.intensity[mask], cloud.labels[mask]


def _strip_bounds(height: int, areas: int) -> list[int]:
    # Integer linspace(0, H, areas + 1): exact for the small splits used here.
    return [(i * height) // areas for i in range(areas + 1)]


def mix_inclination(a: PointCloud, b: PointCloud, config: SensorConfig,
                    areas: int) -> PointCloud:
    """Alternate row strips: even strips keep scan a, odd strips take scan b."""
    va = project(a, config).v
    vb = project(b, config).v
    parts = []
    bounds = _strip_bounds(config.height, areas)
    for i in range(areas):
        lo, hi = bounds[i], bounds[i + 1]
        src, v = (a, va) if i % 2 == 0 else (b, vb)
        parts.append(_take(src, (v >= lo) & (v < hi)))
    return PointCloud(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
    )


def mix_azimuth(a: PointCloud, b: PointCloud, config: SensorConfig,
                start: int) -> PointCloud:
    """Columns [start, start + W/2) come from scan b, the complement from a."""
    ua = project(a, config).u
    ub = project(b, config).u
    end = start + config.width // 2
    keep_a = (ua < start) | (ua >= end)
    keep_b = (ub >= start) & (ub < end)
    pa, pb = _take(a, keep_a), _take(b, keep_b)
    return PointCloud(
        np.concatenate([pa[0], pb[0]]),
        np.concatenate([pa[1], pb[1]]),
        np.concatenate([pa[2], pb[2]]),
    )


def frustum_mix(a: PointCloud, b: PointCloud, config: SensorConfig,
                spec: MixSpec) -> PointCloud:
    """Swap complementary frustum regions between two labeled scans."""
    if a.labels is None or b.labels is None:
        raise DataError("frustum_mix needs labeled clouds")
    if any(n > config.height for n in spec.num_areas_choices):
        raise DataError("num_areas_choices entries must not exceed the image height")
    rng = Xorshift64Star(spec.rng_seed)
    if spec.mode == MODE_COIN:
        mode = MODE_INCLINATION if rng.coin() else MODE_AZIMUTH
    else:
        mode = spec.mode
    if mode == MODE_INCLINATION:
        areas = rng.choice(spec.num_areas_choices)
        return mix_inclination(a, b, config, areas)
    start = rng.below(config.width // 2)
    return mix_azimuth(a, b, config, start)


def range_interpolate(cloud: PointCloud, config: SensorConfig,
                      direction: str = "h") -> Tuple[PointCloud, int]:
    """Fill empty pixels whose two direction neighbors are both occupied.

    Scans the grid row-major and updates the working image in place, so a
    synthesized pixel is visible to later pixels of the same pass. Original
    points come first in the output; synthesized points are appended. On a
    labeled cloud each new point takes the shared neighbor label, or the
    ignore label when the neighbors disagree; unlabeled clouds stay
    unlabeled.
    """
    if direction not in ("h", "v"):
        raise DataError("direction must be 'h' or 'v'")
    index = project(cloud, config)
    image = build_range_image(cloud, index, config)
    h, w = image.shape
    labeled = cloud.labels is not None

    pts = image.rep_point.copy()
    lab = image.label.copy()
    mask = image.valid.copy()

    new_points: list[np.ndarray] = []
    new_labels: list[int] = []
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                continue
            if direction == "h":
                if not (x - 1 >= 0 and x + 1 < w):
                    continue
                n0, n1 = (y, x - 1), (y, x + 1)
            else:
                if not (y - 1 >= 0 and y + 1 < h):
                    continue
                n0, n1 = (y - 1, x), (y + 1, x)
            if not (mask[n0] and mask[n1]):
                continue
            record = 0.5 * (pts[n0] + pts[n1])
            new_points.append(record)
            if labeled:
                label = int(lab[n0]) if lab[n0] == lab[n1] else config.ignore_label
                new_labels.append(label)
            else:
                label = config.ignore_label
            pts[y, x] = record
            lab[y, x] = label
            mask[y, x] = True

    count = len(new_points)
    if count == 0:
        return cloud, 0
    added = np.asarray(new_points)
    xyz = np.concatenate([cloud.xyz, added[:, :3]])
    intensity = np.concatenate([cloud.intensity, added[:, 3]])
    labels = None
    if labeled:
        labels = np.concatenate([cloud.labels, np.asarray(new_labels, dtype=np.int64)])
    return PointCloud(xyz, intensity, labels), count


def rotate_z(cloud: PointCloud, angle: float) -> PointCloud:
    if not math.isfinite(angle):
        raise DataError("rotation angle must be finite")
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return PointCloud(cloud.xyz @ rot.T, cloud.intensity, cloud.labels)


def flip_x(cloud: PointCloud) -> PointCloud:
    xyz = cloud.xyz.copy()
    xyz[:, 0] = -xyz[:, 0]
    return PointCloud(xyz, cloud.intensity, cloud.labels)


def flip_y(cloud: PointCloud) -> PointCloud:
    xyz = cloud.xyz.copy()
    xyz[:, 1] = -xyz[:, 1]
    return PointCloud(xyz, cloud.intensity, cloud.labels)


def scale(cloud: PointCloud, factor: float) -> PointCloud:
    if not (math.isfinite(factor) and factor > 0.0):
        raise DataError("scale factor must be finite and positive")
    return PointCloud(cloud.xyz * factor, cloud.intensity, cloud.labels)


def jitter(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    if not math.isfinite(sigma):
        raise DataError("jitter sigma must be finite")
    rng = Xorshift64Star(seed)
    noise = np.array([[rng.normal(0.0, sigma) for _ in range(3)]
                      for _ in range(len(cloud))])
    if len(cloud) == 0:
        noise = noise.reshape(0, 3)
    return PointCloud(cloud.xyz + noise, cloud.intensity, cloud.labels)


def drop(cloud: PointCloud, p: float, seed: int) -> PointCloud:
    """Remove each point independently with probability p."""
    if not (0.0 <= p < 1.0):
        raise DataError("drop probability must be in [0, 1)")
    rng = Xorshift64Star(seed)
    keep = np.array([rng.uniform() >= p for _ in range(len(cloud))], dtype=bool)
    labels = cloud.labels[keep] if cloud.labels is not None else None
    return PointCloud(cloud.xyz[keep], cloud.intensity[keep], labels)
