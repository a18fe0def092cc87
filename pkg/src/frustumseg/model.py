"""Frustum-range segmentation network.

The graph mirrors the frustum-range design: a per-point encoder over the
8-wide input (x, y, z, intensity, depth, offsets from the frustum mean),
a scatter-max bridge onto the 2D grid, a small convolutional backbone
whose stages each run a bidirectional frustum-point fusion block, and a
head that merges per-stage features at full resolution before classifying
every point, occluded members included. Per-stage frustum logits feed the
frustum-level supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .augment import range_interpolate
from .errors import DataError
from .geometry import FrustumIndex, downsample_index, frustum_stats, project
from .losses import LossWeights, frustum_pseudo_labels, total_loss
from .nn import Tensor
from .rng import Xorshift64Star
from .scan_io import PointCloud, RunConfig, SensorConfig

INPUT_WIDTH = 8  # x, y, z, intensity, depth, dx, dy, dz from the frustum mean

# Fixed rescaling of the encoder input channels. The normalization layers
# were replaced by plain biases, so meter-scale coordinates and depths are
# brought near unit range here; offsets from the frustum mean and the
# intensity already live there.
INPUT_SCALE = np.array([0.1, 0.1, 0.1, 1.0, 0.1, 1.0, 1.0, 1.0])


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    encoder_channels: Tuple[int, ...] = (64, 128, 256, 256)
    frustum_channels: int = 16
    stage_channels: Tuple[int, ...] = (128, 128, 128, 128)
    strides: Tuple[int, ...] = (1, 2, 2, 2)
    head_channels: Tuple[int, ...] = (256, 128)
    interp: bool = False
    interp_direction: str = "h"

    def __post_init__(self):
        if len(self.stage_channels) != len(self.strides):
            raise DataError("stage_channels and strides must have equal length")
        if not self.stage_channels:
            raise DataError("at least one stage is required")
        widths = (*self.encoder_channels, self.frustum_channels,
                  *self.stage_channels, *self.head_channels, self.num_classes)
        if min(widths) < 1:
            raise DataError("all channel widths must be positive")
        if len(self.head_channels) != 2:
            raise DataError("head_channels must list two widths")
        if any(s not in (1, 2) for s in self.strides):
            raise DataError("strides must be 1 or 2")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "ModelConfig":
        return cls(
            num_classes=cfg.sensor.num_classes,
            encoder_channels=cfg.encoder_channels,
            frustum_channels=cfg.frustum_channels,
            stage_channels=cfg.stage_channels,
            strides=cfg.strides,
            head_channels=cfg.head_channels,
            interp=cfg.interp,
            interp_direction=cfg.interp_direction,
        )


@dataclass
class PreparedScene:
    """Projection-dependent context reused across forward passes."""

    cloud: PointCloud
    n_original: int
    index: FrustumIndex
    stage_indices: List[FrustumIndex]
    stage_factors: List[int]
    inputs: np.ndarray  # (N, 8)
    pseudo_labels: Optional[List[np.ndarray]] = None  # per stage, flattened


@dataclass
class ForwardTrace:
    """Every intermediate needed for supervision and inspection."""

    prepared: PreparedScene
    point_low: Tensor
    stage_point_feats: List[Tensor]
    stage_frustum_feats: List[Tensor]
    stage_fused_grids: List[Tensor]
    point_logits: Tensor
    frustum_logits: List[Tensor]  # per stage, (Hk*Wk, C)


class FrustumRangeNet:
    """Configurable frustum-range graph over the hand-rolled kernels."""

    def __init__(self, config: ModelConfig, sensor: SensorConfig, seed: int = 0):
        self.config = config
        self.sensor = sensor
        self.params: Dict[str, Tensor] = {}
        self._rng = Xorshift64Star(seed)
        self._build()

    # -- parameter construction -------------------------------------------

    def _uniform(self, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        rng = self._rng
        size = int(np.prod(shape))
        flat = np.fromiter((rng.uniform() for _ in range(size)),
                           dtype=np.float64, count=size)
        return ((flat * 2.0 - 1.0) * bound).reshape(shape)

    def _dense(self, name: str, cin: int, cout: int) -> None:
        self.params[f"{name}.weight"] = nn.parameter(
            self._uniform((cin, cout), cin), f"{name}.weight")
        self.params[f"{name}.bias"] = nn.parameter(
            self._uniform((cout,), cin), f"{name}.bias")

    def _conv(self, name: str, cin: int, cout: int) -> None:
        self.params[f"{name}.weight"] = nn.parameter(
            self._uniform((cout, cin, 3, 3), cin * 9), f"{name}.weight")
        self.params[f"{name}.bias"] = nn.parameter(
            self._uniform((cout,), cin * 9), f"{name}.bias")

    def _build(self) -> None:
        cfg = self.config
        cin = INPUT_WIDTH
        for i, cout in enumerate(cfg.encoder_channels):
            self._dense(f"encoder.{i}", cin, cout)
            cin = cout
        enc_out = cin
        self._dense("encoder.frustum", enc_out, cfg.frustum_channels)

        grid_ch = cfg.frustum_channels
        point_ch = enc_out
        for k, (stage_ch, _) in enumerate(zip(cfg.stage_channels, cfg.strides)):
            self._conv(f"stage.{k}.conv", grid_ch, stage_ch)
            self._dense(f"stage.{k}.point_fuse", stage_ch + point_ch, stage_ch)
            self._conv(f"stage.{k}.grid_fuse", 2 * stage_ch, stage_ch)
            self._conv(f"stage.{k}.gate", stage_ch, stage_ch)
            self._dense(f"stage.{k}.frustum_cls", stage_ch, cfg.num_classes)
            grid_ch = stage_ch
            point_ch = stage_ch

        merged = sum(cfg.stage_channels)
        h0, h1 = cfg.head_channels
        self._conv("head.grid_reduce.0", merged, h0)
        self._conv("head.grid_reduce.1", h0, h1)
        self._dense("head.point_reduce.0", merged, h0)
        self._dense("head.point_reduce.1", h0, h1)
        self._dense("head.grid_to_point", h1, h1)
        self._dense("head.bridge", h1, enc_out)
        self._dense("head.classifier", enc_out, cfg.num_classes)

    # -- parameter management ---------------------------------------------

    @property
    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def freeze(self) -> None:
        """Drop gradient buffers for shared read-only inference."""
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        extra = sorted(set(state) - set(self.params))
        if missing or extra:
            raise DataError(f"checkpoint mismatch: missing {missing}, extra {extra}")
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise DataError(f"checkpoint shape {arr.shape} for '{name}', "
                                f"expected {t.data.shape}")
            t.data = arr.copy()

    # -- forward ------------------------------------------------------------

    def prepare(self, cloud: PointCloud, labeled_stages: bool = False) -> PreparedScene:
        """Project (after optional interpolation) and build encoder inputs."""
        cfg = self.config
        n_original = len(cloud)
        if cfg.interp:
            cloud, _ = range_interpolate(cloud, self.sensor, cfg.interp_direction)
        index = project(cloud, self.sensor)
        stats = frustum_stats(cloud, index)
        mean_xyz = stats.mean[index.v, index.u, :3]
        depth = cloud.depth
        inputs = np.concatenate([
            cloud.xyz,
            cloud.intensity[:, None],
            depth[:, None],
            cloud.xyz - mean_xyz,
        ], axis=1) * INPUT_SCALE

        stage_indices: List[FrustumIndex] = []
        stage_factors: List[int] = []
        factor = 1
        for stride in cfg.strides:
            factor *= stride
            stage_factors.append(factor)
            stage_indices.append(downsample_index(index, factor))

        pseudo = None
        if labeled_stages:
            if cloud.labels is None:
                raise DataError("stage supervision needs a labeled cloud")
            pseudo = [
                frustum_pseudo_labels(cloud.labels, index, cfg.num_classes,
                                      self.sensor.ignore_label, factor).reshape(-1)
                for factor in stage_factors
            ]
        return PreparedScene(cloud=cloud, n_original=n_original, index=index,
                             stage_indices=stage_indices,
                             stage_factors=stage_factors, inputs=inputs,
                             pseudo_labels=pseudo)

    def _p(self, name: str) -> Tuple[Tensor, Tensor]:
        return self.params[f"{name}.weight"], self.params[f"{name}.bias"]

    def encode_frustum(self, prep: PreparedScene) -> Tuple[Tensor, Tensor]:
        """Per-point features plus the pooled, projected frustum grid."""
        h = Tensor(prep.inputs)
        n_layers = len(self.config.encoder_channels)
        for i in range(n_layers):
            h = nn.dense(h, *self._p(f"encoder.{i}"))
            if i < n_layers - 1:
                h = nn.relu(h)
        pooled, _ = nn.scatter_max(h, prep.index)
        grid = nn.relu(nn.channel_dense(pooled, *self._p("encoder.frustum")))
        return h, grid

    def backbone_stage(self, k: int, grid: Tensor) -> Tensor:
        return nn.relu(nn.conv3x3(grid, *self._p(f"stage.{k}.conv"),
                                  stride=self.config.strides[k]))

    def fuse_frustum_point(self, k: int, point_feats: Tensor, grid: Tensor,
                           index: FrustumIndex) -> Tuple[Tensor, Tensor]:
        """One bidirectional fusion block at stage resolution k.

        Grid features are gathered onto the points and merged through an
        MLP; the updated points are max-pooled back, fused with the grid by
        one convolution, and added residually under a sigmoid gate.
        """
        from_grid = nn.gather(grid, index)
        new_points = nn.relu(nn.dense(
            nn.concat([from_grid, point_feats], axis=1),
            *self._p(f"stage.{k}.point_fuse")))
        pooled, _ = nn.scatter_max(new_points, index)
        fused = nn.relu(nn.conv3x3(nn.concat([pooled, grid], axis=0),
                                   *self._p(f"stage.{k}.grid_fuse"), stride=1))
        gate = nn.sigmoid(nn.conv3x3(fused, *self._p(f"stage.{k}.gate"), stride=1))
        new_grid = nn.add(grid, nn.mul(gate, fused))
        return new_points, new_grid

    def fusion_head(self, stage_points: List[Tensor], stage_grids: List[Tensor],
                    point_low: Tensor, index: FrustumIndex) -> Tensor:
        """Merge per-stage features at full resolution and classify points."""
        ups = [nn.upsample_bilinear(g, index.height, index.width)
               for g in stage_grids]
        merged_grid = nn.concat(ups, axis=0)
        merged_grid = nn.relu(nn.conv3x3(merged_grid, *self._p("head.grid_reduce.0")))
        merged_grid = nn.relu(nn.conv3x3(merged_grid, *self._p("head.grid_reduce.1")))

        merged_points = nn.concat(stage_points, axis=1)
        merged_points = nn.relu(nn.dense(merged_points, *self._p("head.point_reduce.0")))
        merged_points = nn.relu(nn.dense(merged_points, *self._p("head.point_reduce.1")))

        grid_as_points = nn.gather(merged_grid, index)
        bridged = nn.relu(nn.dense(grid_as_points, *self._p("head.grid_to_point")))
        fused_points = nn.add(bridged, merged_points)
        fused_points = nn.relu(nn.dense(fused_points, *self._p("head.bridge")))
        fused_points = nn.add(fused_points, point_low)
        return nn.dense(fused_points, *self._p("head.classifier"))

    def forward_prepared(self, prep: PreparedScene) -> ForwardTrace:
        point_low, grid = self.encode_frustum(prep)
        point_feats = point_low
        stage_points: List[Tensor] = []
        stage_grids_in: List[Tensor] = []
        stage_grids: List[Tensor] = []
        frustum_logits: List[Tensor] = []
        for k in range(self.config.num_stages):
            grid = self.backbone_stage(k, grid)
            stage_grids_in.append(grid)
            point_feats, grid = self.fuse_frustum_point(
                k, point_feats, grid, prep.stage_indices[k])
            stage_points.append(point_feats)
            stage_grids.append(grid)
            frustum_logits.append(nn.dense(nn.reshape_to_rows(grid),
                                           *self._p(f"stage.{k}.frustum_cls")))

        logits = self.fusion_head(stage_points, stage_grids, point_low,
                                  prep.index)
        return ForwardTrace(prepared=prep, point_low=point_low,
                            stage_point_feats=stage_points,
                            stage_frustum_feats=stage_grids_in,
                            stage_fused_grids=stage_grids,
                            point_logits=logits,
                            frustum_logits=frustum_logits)

    def forward(self, cloud: PointCloud, labeled_stages: bool = False) -> ForwardTrace:
        return self.forward_prepared(self.prepare(cloud, labeled_stages=labeled_stages))

    def predict(self, cloud: PointCloud) -> np.ndarray:
        """Per-point class ids for the original points, no post-processing."""
        trace = self.forward(cloud)
        labels = trace.point_logits.data.argmax(axis=1).astype(np.int64)
        return labels[:trace.prepared.n_original]

    def loss(self, trace: ForwardTrace,
             weights: LossWeights = LossWeights()) -> Tensor:
        """Combined point and per-stage frustum loss for a prepared trace."""
        prep = trace.prepared
        if prep.cloud.labels is None or prep.pseudo_labels is None:
            raise DataError("loss needs a trace prepared with labeled_stages=True")
        return total_loss(trace.point_logits, prep.cloud.labels,
                          trace.frustum_logits, prep.pseudo_labels,
                          self.sensor.ignore_label, weights)


DESK_SCENE_SEED = 7
DESK_MODEL_SEED = 6


def desk_grad_check(seed: int = DESK_MODEL_SEED, eps: float = 1e-5,
                    tolerance: float = 1e-4):
    """Finite-difference verification of the full graph on a small instance.

    Runs on a 3x6 grid with 30 points, 2 stages, and widths at most 6.
    Biases are shifted positive after init so the check probes a
    well-conditioned differentiable point: inactive ReLU paths would push
    gradient components below the f64 finite-difference noise floor, and
    near-kink activations would corrupt the central differences. Seeds far
    from the default can still land near a kink; the report says so.
    """
    from .nn import grad_check

    sensor = SensorConfig(height=3, width=6, fov_up_deg=3.0, fov_down_deg=-25.0,
                          num_classes=3, ignore_label=255)
    config = ModelConfig(num_classes=3, encoder_channels=(6, 6),
                         frustum_channels=3, stage_channels=(4, 4),
                         strides=(1, 2), head_channels=(6, 6))
    model = FrustumRangeNet(config, sensor, seed=seed)
    for name, tensor in model.parameters.items():
        if name.endswith(".bias"):
            tensor.data += 0.25
    from .scan_io import synth_scene

    cloud = synth_scene(DESK_SCENE_SEED, 30, sensor)
    prep = model.prepare(cloud, labeled_stages=True)

    def loss_fn():
        return model.loss(model.forward_prepared(prep))

    return grad_check(loss_fn, model.parameters, eps=eps, tolerance=tolerance)


def fit(model: FrustumRangeNet, cloud: PointCloud, epochs: int, lr: float,
        momentum: float = 0.9, weights: LossWeights = LossWeights(),
        log=None) -> List[float]:
    """Full-batch overfit loop on one labeled scene; returns the loss history."""
    from .losses import MomentumSgd

    prep = model.prepare(cloud, labeled_stages=True)
    opt = MomentumSgd(model.parameters, lr=lr, momentum=momentum)
    history: List[float] = []
    for epoch in range(epochs):
        model.zero_grad()
        trace = model.forward_prepared(prep)
        loss = model.loss(trace, weights)
        loss.backward()
        opt.step()
        value = float(loss.data)
        history.append(value)
        if log is not None:
            log(epoch, value)
    return history
