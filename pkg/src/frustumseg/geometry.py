"""Spherical projection, frustum grouping, range images, and PPM rendering.

A frustum region is the set of points that share one range-image pixel
under the projection

    u_f = 1/2 * (1 - atan2(y, x) / pi) * W
    v_f = (fov_up - asin(z / d)) / fov_span * H

with d the point depth and fov_span = |fov_up| + |fov_down| in radians, so
row 0 sits at the top of the field of view and row H at the bottom.
Continuous coordinates are discretized by floor; the azimuth wraps modulo W
and the row index clamps into [0, H). Member lists keep ascending point
order so every downstream argmax tie-break is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import DataError, ProjectionError
from .scan_io import PointCloud, SensorConfig, atomic_write_bytes

Pixel = Tuple[int, int]  # (v, u)

INVALID_COLOR = (0, 0, 0)
IGNORE_COLOR = (80, 80, 80)


@dataclass(frozen=True)
class FrustumIndex:
    """Per-point pixel coordinates plus the inverse pixel-to-points map."""

    u: np.ndarray  # (N,) int64 in [0, W)
    v: np.ndarray  # (N,) int64 in [0, H)
    height: int
    width: int
    members: Mapping[Pixel, list]

    def __len__(self) -> int:
        return self.u.shape[0]

    @property
    def pixel_ids(self) -> np.ndarray:
        """Flattened row-major pixel id per point."""
        return self.v * self.width + self.u


def project(cloud: PointCloud, config: SensorConfig) -> FrustumIndex:
    """Assign every point to its frustum pixel."""
    depth = cloud.depth
    if depth.size and depth.min() <= 0.0:
        raise ProjectionError(f"zero-depth point {int(np.argmin(depth))}")
    x, y, z = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    u_f = 0.5 * (1.0 - np.arctan2(y, x) / math.pi) * config.width
    # The ratio can exceed 1 by one ulp when x = y = 0; clip before asin.
    elev = np.arcsin(np.clip(z / depth, -1.0, 1.0))
    # Row 0 must sit at elevation fov_up and row H at the bottom of the span.
    v_f = (config.fov_up_rad - elev) / config.fov_span_rad * config.height
    u = np.floor(u_f).astype(np.int64) % config.width
    v = np.clip(np.floor(v_f).astype(np.int64), 0, config.height - 1)

    members: Dict[Pixel, list] = {}
    for i in range(u.shape[0]):
        members.setdefault((int(v[i]), int(u[i])), []).append(i)
    return FrustumIndex(u=u, v=v, height=config.height, width=config.width,
                        members=members)


def downsample_index(index: FrustumIndex, factor: int) -> FrustumIndex:
    """Re-bin points onto a grid shrunk by an integer factor (ceil division)."""
    if factor < 1:
        raise DataError("downsample factor must be positive")
    if factor == 1:
        return index
    h = -(-index.height // factor)
    w = -(-index.width // factor)
    u = index.u // factor
    v = index.v // factor
    members: Dict[Pixel, list] = {}
    for i in range(u.shape[0]):
        members.setdefault((int(v[i]), int(u[i])), []).append(i)
    return FrustumIndex(u=u, v=v, height=h, width=w, members=members)


@dataclass(frozen=True)
class RangeImage:
    """Per-pixel representative point, label, and validity mask."""

    rep_index: np.ndarray  # (H, W) int64, -1 where empty
    rep_point: np.ndarray  # (H, W, 4) float64 (x, y, z, intensity)
    rep_depth: np.ndarray  # (H, W) float64, 0 where empty
    label: np.ndarray      # (H, W) int64, ignore_label where empty or unlabeled
    valid: np.ndarray      # (H, W) bool

    @property
    def shape(self) -> Tuple[int, int]:
        return self.valid.shape


def build_range_image(cloud: PointCloud, index: FrustumIndex,
                      config: SensorConfig) -> RangeImage:
    """Pick the minimum-depth member of each pixel as its representative."""
    h, w = index.height, index.width
    rep_index = np.full((h, w), -1, dtype=np.int64)
    rep_point = np.zeros((h, w, 4), dtype=np.float64)
    rep_depth = np.zeros((h, w), dtype=np.float64)
    label = np.full((h, w), config.ignore_label, dtype=np.int64)
    valid = np.zeros((h, w), dtype=bool)

    depth = cloud.depth
    for (pv, pu), pts in index.members.items():
        best = pts[0]
        for i in pts[1:]:
            if depth[i] < depth[best]:  # strict: ties keep the smallest index
                best = i
        rep_index[pv, pu] = best
        rep_point[pv, pu, :3] = cloud.xyz[best]
        rep_point[pv, pu, 3] = cloud.intensity[best]
        rep_depth[pv, pu] = depth[best]
        valid[pv, pu] = True
        if cloud.labels is not None:
            label[pv, pu] = cloud.labels[best]
    return RangeImage(rep_index, rep_point, rep_depth, label, valid)


@dataclass(frozen=True)
class FrustumStats:
    """Arithmetic mean of member records per occupied pixel."""

    mean: np.ndarray   # (H, W, 4) float64; zeros where empty
    count: np.ndarray  # (H, W) int64

    def mean_at(self, v: int, u: int) -> Optional[np.ndarray]:
        if self.count[v, u] == 0:
            return None
        return self.mean[v, u]


def frustum_stats(cloud: PointCloud, index: FrustumIndex) -> FrustumStats:
    """Mean coordinates and intensity over each pixel's members."""
    if len(cloud) == 0:
        raise DataError("frustum_stats needs a nonempty cloud")
    h, w = index.height, index.width
    total = np.zeros((h, w, 4), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    records = np.concatenate([cloud.xyz, cloud.intensity[:, None]], axis=1)
    np.add.at(total, (index.v, index.u), records)
    np.add.at(count, (index.v, index.u), 1)
    mean = np.zeros_like(total)
    occupied = count > 0
    mean[occupied] = total[occupied] / count[occupied][:, None]
    return FrustumStats(mean=mean, count=count)


def default_palette(num_classes: int) -> Dict[int, Tuple[int, int, int]]:
    """Fixed, well-separated colors for up to 32 classes."""
    base = [
        (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
        (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
        (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    ]
    out = {}
    for c in range(num_classes):
        r, g, b = base[c % len(base)]
        shade = 1.0 - 0.35 * (c // len(base))
        out[c] = (int(r * shade), int(g * shade), int(b * shade))
    return out


def render_ppm(image: RangeImage, palette: Mapping[int, Tuple[int, int, int]],
               path: str | Path, ignore_label: int = 255) -> None:
    """Write the label grid as a binary portable pixmap (P6, maxval 255).

    Valid pixels take their class color; ignore-labeled pixels and empty
    pixels get fixed sentinel colors. Row 0 of the image is the top row.
    """
    h, w = image.shape
    present = np.unique(image.label[image.valid])
    missing = [int(c) for c in present if c != ignore_label and int(c) not in palette]
    if missing:
        raise DataError(f"palette misses classes {missing}")

    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[:] = INVALID_COLOR
    rgb[image.valid] = IGNORE_COLOR
    for cls in present:
        if int(cls) == ignore_label:
            continue
        mask = image.valid & (image.label == cls)
        rgb[mask] = palette[int(cls)]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + rgb.tobytes())
