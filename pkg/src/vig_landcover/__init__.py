"""Pyramid Vision GNN for multispectral land-cover classification, on a numpy autodiff core."""
from .data import Dataset, load_dataset, split_dataset, synthesize_dataset
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    FormatError,
    TrainingError,
    UsageError,
)
from .gradcheck import grad_check
from .graph import PatchGraph, knn_graph, pairwise_sq_dist
from .grapher import FfnParams, GrapherParams, ffn_block, grapher_block, max_relative_aggregate
from .metrics import aggregate, confusion_counts, decide_labels, metric_report, per_class_extremes
from .model import ModelConfig, VigModel, build_model, count_params
from .tensor import Tensor, backward, precision
from .training import TrainConfig, fit, load_checkpoint, loss, save_checkpoint

__version__ = "0.1.0"
