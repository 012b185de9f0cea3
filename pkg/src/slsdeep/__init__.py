"""SLSDeep skin lesion segmentation on a small NumPy autodiff engine."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import AugmentConfig, load_manifest
from .estimator import SLSDeepSegmenter, check_images, check_masks
from .gradcheck import GradCheckReport, grad_check
from .loss import LossConfig, epe_loss, nll_loss, total_loss
from .metrics import MetricsReport, confusion, evaluate_dataset, metrics_from_counts
from .network import ConfigError, Model, NetworkConfig, build, desk_config, shape_plan
from .tensor import ShapeError, Tape, Tensor
from .trainer import TrainConfig, poly_lr, train

__version__ = "0.1.0"
