"""Vision transformer with importance-sampled token pruning and multi-gate experts
for two-task semantic segmentation, on a small numpy autodiff core."""

from .backbone import Backbone, BackboneConfig, PruneRecord, importance_scores, select_top_k
from .data import SyntheticSpec, TaskSample, augment, generate_synthetic, load_dataset
from .heads import HeadConfig, MaskDecoder, decode_masks
from .metrics import ConfusionMatrix, miou, per_class_iou, pixel_accuracy
from .model import (MateViT, MateVitConfig, TrainState, evaluate, fit, load_checkpoint,
                    save_checkpoint, total_loss)
from .moe import MMoE, GateConfig, RoutingDecision, importance_loss, load_loss, top_m_softmax
from .numerics import Tensor, finite_diff_check, make_rng

__version__ = "0.1.0"
