"""Multimodal optical-SAR change detection toolkit.

Three-path weight-shared encoder with Mixture-of-Experts layers, an
optical-to-SAR speckle bridge with self-distillation training, and a full
train/eval/infer harness.
"""

from .datakit import (
    AugmentationConfig,
    ImagePair,
    PairFolderDataset,
    SyntheticChangeDataset,
    SyntheticSceneConfig,
    augment,
    build_synthetic_dataset,
    generate_scene,
    load_dataset,
    tta_predict,
)
from .errors import (
    CheckpointError,
    CheckpointNotFoundError,
    ConfigurationError,
    DataError,
    M2cdError,
    ShapeError,
    TrainingInstabilityError,
)
from .losses import LossConfig, LossReport, ce_loss, sd_loss, total_loss
from .metrics import ConfusionMatrix, MetricReport, accumulate, compute
from .moe import GateDecision, MoeConfig, MoeLayer, load_balance_stats
from .network import (
    BackboneConfig,
    ChangeDetector,
    FeaturePyramid,
    load_checkpoint,
    save_checkpoint,
)
from .speckle import SpeckleConfig, optical_to_sar, sample_speckle
from .trainer import RunState, TrainConfig, evaluate, run_ablation_grid, train

__version__ = "0.1.0"
