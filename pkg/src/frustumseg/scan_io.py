"""Scan and label IO, synthetic scene generation, and run configuration.

Scan files are little-endian float32 quadruples (x, y, z, intensity); label
files are little-endian uint32 words whose low 16 bits carry the semantic
class (the high bits are instance ids and are dropped on read). All internal
arithmetic is double precision regardless of the on-disk width.
"""

from __future__ import annotations

import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, FormatError
from .rng import Xorshift64Star

LABEL_MASK = 0xFFFF


@dataclass(frozen=True)
class PointCloud:
    """N points with Cartesian coordinates, intensity, and optional labels."""

    xyz: np.ndarray            # (N, 3) float64, meters
    intensity: np.ndarray      # (N,) float64 in [0, 1]
    labels: Optional[np.ndarray] = None  # (N,) int64 class ids

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64)
        inten = np.ascontiguousarray(self.intensity, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise DataError(f"xyz must be (N, 3), got {xyz.shape}")
        if inten.shape != (xyz.shape[0],):
            raise DataError("intensity length does not match point count")
        bad = ~np.isfinite(xyz).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite coordinate at point {int(np.argmax(bad))}")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", inten)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if labels.shape != (xyz.shape[0],):
                raise DataError("labels length does not match point count")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def depth(self) -> np.ndarray:
        """Euclidean distance from the sensor origin, per point."""
        return np.sqrt((self.xyz ** 2).sum(axis=1))

    def with_labels(self, labels: np.ndarray) -> "PointCloud":
        return PointCloud(self.xyz, self.intensity, labels)


@dataclass(frozen=True)
class SensorConfig:
    """Range-image geometry and class bookkeeping for one sensor setup."""

    height: int
    width: int
    fov_up_deg: float
    fov_down_deg: float
    num_classes: int = 3
    ignore_label: int = 255

    def __post_init__(self):
        if self.height < 2 or self.width < 4:
            raise DataError("sensor grid must be at least 2 x 4")
        if not self.fov_up_deg > self.fov_down_deg:
            raise DataError("fov_up_deg must exceed fov_down_deg")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if 0 <= self.ignore_label < self.num_classes:
            raise DataError("ignore_label must lie outside [0, num_classes)")

    @property
    def fov_up_rad(self) -> float:
        return math.radians(self.fov_up_deg)

    @property
    def fov_down_rad(self) -> float:
        return math.radians(self.fov_down_deg)

    @property
    def fov_span_rad(self) -> float:
        """Total vertical span |up| + |down| in radians."""
        return abs(self.fov_up_rad) + abs(self.fov_down_rad)


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write a file via a same-directory temp file and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_scan(path_points: str | Path, path_labels: Optional[str | Path] = None) -> PointCloud:
    """Load a binary scan and, optionally, its label file.

    Raises FormatError on malformed sizes and DataError on non-finite
    coordinates (naming the offending point).
    """
    raw = Path(path_points).read_bytes()
    if len(raw) % 16 != 0:
        raise FormatError(f"{path_points}: size {len(raw)} is not a multiple of 16")
    quads = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    labels = None
    if path_labels is not None:
        lraw = Path(path_labels).read_bytes()
        if len(lraw) != 4 * quads.shape[0]:
            raise FormatError(
                f"{path_labels}: {len(lraw)} bytes for {quads.shape[0]} points")
        words = np.frombuffer(lraw, dtype="<u4")
        labels = (words & LABEL_MASK).astype(np.int64)
    return PointCloud(quads[:, :3], quads[:, 3], labels)


def write_scan(cloud: PointCloud, path_points: str | Path,
               path_labels: Optional[str | Path] = None) -> None:
    """Write coordinates and intensity as float32 quads; labels separately if asked."""
    quads = np.empty((len(cloud), 4), dtype="<f4")
    quads[:, :3] = cloud.xyz
    quads[:, 3] = cloud.intensity
    atomic_write_bytes(path_points, quads.tobytes())
    if path_labels is not None:
        if cloud.labels is None:
            raise DataError("cloud carries no labels to write")
        write_labels(cloud.labels, path_labels)


def write_labels(labels: Sequence[int] | np.ndarray, path: str | Path) -> None:
    """Write class ids as little-endian uint32 words with zero high halves."""
    arr = np.asarray(labels, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > LABEL_MASK):
        bad = int(np.argmax((arr < 0) | (arr > LABEL_MASK)))
        raise ValueError(f"label {arr[bad]} at index {bad} does not fit in 16 bits")
    atomic_write_bytes(path, arr.astype("<u4").tobytes())


def read_labels(path: str | Path) -> np.ndarray:
    """Load a label file on its own (low 16 bits of each word)."""
    raw = Path(path).read_bytes()
    if len(raw) % 4 != 0:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 4")
    return (np.frombuffer(raw, dtype="<u4") & LABEL_MASK).astype(np.int64)


GROUND, WALL, POLE = 0, 1, 2

_GROUND_HEIGHT = -1.6
_WALL_COUNT = 4
_POLE_COUNT = 5


def synth_scene(seed: int, n_points: int, config: SensorConfig) -> PointCloud:
    """Deterministic synthetic scene: ground plane, wall segments, thin poles.

    Points are sampled in sensor-spherical coordinates so every elevation
    falls strictly inside the configured field of view. Poles sit in front
    of walls at shared azimuths, which forces multi-point frustums whose
    occluded members carry a different class than the representative.
    """
    if n_points < 1:
        raise DataError("n_points must be at least 1")
    rng = Xorshift64Star(seed)
    lo = config.fov_down_rad
    hi = config.fov_up_rad
    margin = 0.02 * (hi - lo)
    lo_m, hi_m = lo + margin, hi - margin

    # Scene layout: wall segments (azimuth center, half width, range) and
    # poles placed inside wall segments at shorter range.
    walls = []
    for _ in range(_WALL_COUNT):
        center = rng.uniform_in(0.0, 2.0 * math.pi)
        half_width = rng.uniform_in(math.radians(6.0), math.radians(14.0))
        dist = rng.uniform_in(9.0, 18.0)
        walls.append((center, half_width, dist))
    poles = []
    for k in range(_POLE_COUNT):
        host = walls[k % _WALL_COUNT]
        azimuth = host[0] + rng.uniform_in(-0.5, 0.5) * host[1]
        dist = rng.uniform_in(4.0, min(8.0, host[2] - 2.0))
        poles.append((azimuth, dist))

    xyz = np.empty((n_points, 3), dtype=np.float64)
    intensity = np.empty(n_points, dtype=np.float64)
    labels = np.empty(n_points, dtype=np.int64)

    # Ground elevations must look downward; keep them in the lower band.
    g_hi = min(hi_m, math.radians(-2.5))
    if g_hi <= lo_m:
        g_hi = lo_m + 0.25 * (hi_m - lo_m)

    for i in range(n_points):
        roll = rng.uniform()
        if roll < 0.5:
            cls = GROUND
            elev = rng.uniform_in(lo_m, g_hi)
            # Flat plane at fixed height: range follows from the elevation.
            dist = abs(_GROUND_HEIGHT) / max(math.sin(-elev), 1e-3)
            dist *= 1.0 + 0.01 * rng.normal()
            azim = rng.uniform_in(0.0, 2.0 * math.pi)
            base_intensity = 0.20
        elif roll < 0.8:
            cls = WALL
            center, half_width, wdist = walls[rng.below(_WALL_COUNT)]
            azim = center + rng.uniform_in(-half_width, half_width)
            elev = rng.uniform_in(max(lo_m, math.radians(-9.0)), hi_m)
            dist = wdist / max(math.cos(elev), 0.5)
            dist *= 1.0 + 0.005 * rng.normal()
            base_intensity = 0.50
        else:
            cls = POLE
            azim_c, pdist = poles[rng.below(_POLE_COUNT)]
            azim = azim_c + math.radians(0.25) * rng.normal()
            elev = rng.uniform_in(max(lo_m, math.radians(-13.0)), hi_m)
            dist = pdist / max(math.cos(elev), 0.5)
            base_intensity = 0.85
        cos_e = math.cos(elev)
        xyz[i, 0] = dist * cos_e * math.cos(azim)
        xyz[i, 1] = dist * cos_e * math.sin(azim)
        xyz[i, 2] = dist * math.sin(elev)
        intensity[i] = min(1.0, max(0.0, base_intensity + 0.05 * rng.normal()))
        labels[i] = cls

    return PointCloud(xyz, intensity, labels)


_TRUE_WORDS = {"1", "true", "on", "yes"}
_FALSE_WORDS = {"0", "false", "off", "no"}


@dataclass(frozen=True)
class RunConfig:
    """Sensor geometry plus every tunable consumed by the CLI commands."""

    sensor: SensorConfig
    seed: int = 0
    # augmentation
    mix_num_areas: tuple[int, ...] = (3, 4, 5, 6)
    interp_direction: str = "h"
    augment_seed: int = 0
    # model
    stages: int = 4
    stage_channels: tuple[int, ...] = (128, 128, 128, 128)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    encoder_channels: tuple[int, ...] = (64, 128, 256, 256)
    frustum_channels: int = 16
    head_channels: tuple[int, ...] = (256, 128)
    interp: bool = False
    # supervision
    lambda_frustum: float = 1.0
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 150

    def __post_init__(self):
        if len(self.stage_channels) != self.stages or len(self.strides) != self.stages:
            raise DataError("stage_channels and strides must list one entry per stage")
        if self.interp_direction not in ("h", "v"):
            raise DataError("interp_direction must be 'h' or 'v'")
        if any(n < 2 or n > self.sensor.height for n in self.mix_num_areas):
            raise DataError("mix_num_areas entries must be in [2, height]")


_MANDATORY_KEYS = ("height", "width", "fov_up_deg", "fov_down_deg")

_INT_KEYS = {"height", "width", "ignore_label", "num_classes", "seed",
             "augment_seed", "stages", "frustum_channels", "epochs"}
_FLOAT_KEYS = {"fov_up_deg", "fov_down_deg", "lambda_frustum", "lr", "momentum"}
_INT_LIST_KEYS = {"mix_num_areas", "stage_channels", "strides",
                  "encoder_channels", "head_channels"}
_STR_KEYS = {"interp_direction"}
_BOOL_KEYS = {"interp"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _INT_LIST_KEYS | _STR_KEYS | _BOOL_KEYS


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse `key = value` lines; `#` starts a comment; last duplicate wins."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise FormatError(f"{source}:{lineno}: expected 'key = value'")
        key, value = body.split("=", 1)
        key = key.strip()
        value = value.strip()
        if key not in _ALL_KEYS:
            warnings.warn(f"{source}:{lineno}: unknown config key '{key}'", stacklevel=2)
            continue
        raw[key] = value

    for key in _MANDATORY_KEYS:
        if key not in raw:
            raise FormatError(f"{source}: missing mandatory key '{key}'")

    def convert(key: str, value: str):
        try:
            if key in _INT_KEYS:
                return int(value)
            if key in _FLOAT_KEYS:
                return float(value)
            if key in _INT_LIST_KEYS:
                return tuple(int(tok) for tok in value.split(",") if tok.strip())
            if key in _BOOL_KEYS:
                low = value.lower()
                if low in _TRUE_WORDS:
                    return True
                if low in _FALSE_WORDS:
                    return False
                raise ValueError(value)
            return value
        except ValueError as exc:
            raise FormatError(f"{source}: cannot parse '{key} = {value}'") from exc

    values = {key: convert(key, val) for key, val in raw.items()}

    sensor = SensorConfig(
        height=values.pop("height"),
        width=values.pop("width"),
        fov_up_deg=values.pop("fov_up_deg"),
        fov_down_deg=values.pop("fov_down_deg"),
        num_classes=values.pop("num_classes", 3),
        ignore_label=values.pop("ignore_label", 255),
    )
    cfg = RunConfig(sensor=sensor)
    if values:
        cfg = replace(cfg, **values)
    return cfg


def read_config(path: str | Path) -> RunConfig:
    """Load a run configuration file."""
    return parse_config_text(Path(path).read_text(), source=str(path))
