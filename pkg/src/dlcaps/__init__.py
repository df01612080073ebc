"""DL-CapsNet: a capsule network with capsule summarization, on a numpy autodiff core."""

from .capsule_ops import CapsSum, CapsSumConfig, ConvCaps, ConvCapsConfig, caps_sum, conv_caps, squash
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigurationError, DLCapsError, FormatError, NumericError, UsageError
from .estimator import DLCapsNetClassifier
from .gradcheck import gradient_check
from .model import (
    DLCapsNet,
    ModelConfig,
    OutputCapsules,
    build_model,
    class_probabilities,
    count_params,
    ensemble_predict,
    predict,
)
from .routing import DynamicRouting, Routing3D, Routing3DConfig, dynamic_routing, routing_3d
from .tensor import Tensor, debug_mode, no_grad, precision
from .training import MarginLossParams, TrainConfig, hard_training_params, margin_loss, reconstruction_loss

__version__ = "0.1.0"
