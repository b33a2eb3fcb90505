"""Multiplication-free convolutional networks built from bit-shift and adder filters."""

from .adder import AdderFilterBank, adder_conv2d, adder_conv2d_backward, adder_lr_scale
from .analysis import CostReport, RatioReport, analyze_network, cost_ghost_sa, flops_standard_conv, ratios
from .checkpoint import load_checkpoint, save_checkpoint
from .core import ConvGeometry, conv2d
from .datasets import DatasetHandle, load_cifar10, load_mnist
from .estimator import GhostSANetClassifier, PowerOfTwoQuantizer
from .exceptions import (
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    DimensionError,
    GhostSAError,
    ValidationError,
    WorkloadTooSmallError,
)
from .ghost import (
    BottleneckConfig,
    GhostSABottleneck,
    GhostSAConfig,
    GhostSAModule,
    GhostSANet,
    build_network,
    structural_audit,
)
from .netspec import NetworkSpec, StageSpec, parse_network_config, resnet20_spec, toy_mnist_spec
from .shift import ShiftFilterBank, ShiftWeight, quantize_shift, shift_conv2d
from .training import Metrics, TrainConfig, evaluate, sgd_step, train

__version__ = "0.1.0"
