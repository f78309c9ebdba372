"""Vision-transformer and CNN patch classifiers on a small numpy autograd engine."""

from .autograd import Tensor, finite_diff_check, precision, set_precision
from .checkpoint import load_checkpoint, save_checkpoint
from .cnn import CNNConfig, CNNModel, cnn_forward, conv2d, maxpool2d
from .data import (
    DatasetSplit,
    LabeledPatch,
    extract_patches_grid,
    generate_synthetic_dataset,
    load_dataset,
    split_dataset,
)
from .training import AdamState, EpochLog, TrainConfig, adam_step, cross_entropy_loss, evaluate, train
from .vit import (
    ViTConfig,
    ViTModel,
    multi_head_attention,
    patchify,
    positional_encoding,
    predict_class,
    scaled_dot_product_attention,
    transformer_block,
    vit_forward,
)

__version__ = "0.1.0"
