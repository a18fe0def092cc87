"""Frustum-range LiDAR semantic segmentation toolkit."""

from .errors import (DataError, FormatError, FrustumSegError, NumericError,
                     ProjectionError)
from .scan_io import (PointCloud, RunConfig, SensorConfig, read_config,
                      read_labels, read_scan, synth_scene, write_labels,
                      write_scan)
from .geometry import (FrustumIndex, FrustumStats, RangeImage,
                       build_range_image, default_palette, downsample_index,
                       frustum_stats, project, render_ppm)
from .augment import (MixSpec, drop, flip_x, flip_y, frustum_mix, jitter,
                      range_interpolate, rotate_z, scale)
from .nn import (GradCheckReport, Tensor, grad_check, load_checkpoint,
                 parameter, save_checkpoint)
from .losses import (LossWeights, MomentumSgd, cross_entropy,
                     frustum_pseudo_labels, lovasz_softmax, total_loss)
from .model import (ForwardTrace, FrustumRangeNet, ModelConfig,
                    desk_grad_check, fit)
from .metrics import (ConfusionMatrix, CorruptionScores, CorruptionTable,
                      MetricReport, corruption_scores, iou_acc,
                      knn_postprocess, read_corruption_table)

__version__ = "0.1.0"
