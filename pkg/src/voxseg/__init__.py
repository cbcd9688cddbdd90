"""Full-volume 3-D brain segmentation engine.

A self-contained numpy implementation of a high-resolution multi-branch
fully convolutional segmentation network, with reverse-mode automatic
differentiation, software half-precision mixed training, volumetric
augmentation, Dice/Hausdorff evaluation and a sklearn-style estimator.
"""

from .augment import DeformField, DeformParams, NoiseParams, augment_pair, elastic_deform, gaussian_noise, make_deform_field
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateInputError,
    FormatError,
    ShapeError,
    TruncatedFileError,
    UnsupportedDtypeError,
    VoxsegError,
)
from .estimator import VolumeSegmenter, check_labels, check_volume
from .halfprec import (
    Half,
    LossScaler,
    MasterWeights,
    PrecisionLevel,
    PrecisionPolicy,
    ScaleDecision,
    decode_fp16,
    encode_fp16,
    fma_mixed,
    quantize_tensor,
    scale_loss,
    unscale_grads,
)
from .losses import LossConfig, LossKind, combined_loss, cross_entropy, dice_loss
from .metrics import MetricReport, dsc, evaluate, hausdorff, paired_t_test
from .network import (
    Network,
    NetworkConfig,
    build_network,
    count_parameters,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .synthetic import make_toy_pair
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat_channels,
    conv3d,
    instance_norm,
    relu,
    softmax_channels,
    trilinear_resize,
    tsum,
)
from .trainer import OptimizerState, TrainConfig, TrainResult, infer, radam_step, train
from .volumes import LabelVolume, Volume, load_volume, one_hot, save_volume, zscore_normalize

__version__ = "0.1.0"
