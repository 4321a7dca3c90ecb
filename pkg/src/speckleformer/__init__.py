"""Temperature regression from fiber specklegrams with transformer,
graph-attention, and CNN models on a from-scratch fp64 autodiff core."""

from .data import (PreprocessConfig, SpecklegramSample, SyntheticConfig,
                   generate_synthetic, load_dataset, preprocess, split,
                   temperature_of_index)
from .gradcheck import grad_check
from .graphs import (AdjacencyMatrix, GatParams, feature_adjacency,
                     full_adjacency, gat_attention, importance_attention,
                     learnable_adjacency, scaled_dot_attention,
                     spatial_adjacency)
from .models import Model, ModelConfig, default_config
from .tensor import ParameterStore, Tensor, backward, record, set_debug
from .train import (Checkpoint, MetricsReport, TrainConfig, adam_step,
                    evaluate, load_checkpoint, mse_loss, save_checkpoint,
                    train)
from .xai import (AttentionStack, SaliencyMap, extract_attention_maps,
                  importance_heatmap, render_grayscale, render_overlay,
                  saliency_map)

__version__ = "0.1.0"

__all__ = [
    "AdjacencyMatrix", "AttentionStack", "Checkpoint", "GatParams",
    "MetricsReport", "Model", "ModelConfig", "ParameterStore",
    "PreprocessConfig", "SaliencyMap", "SpecklegramSample",
    "SyntheticConfig", "Tensor", "TrainConfig", "adam_step", "backward",
    "default_config", "evaluate", "extract_attention_maps",
    "feature_adjacency", "full_adjacency", "gat_attention",
    "generate_synthetic", "grad_check", "importance_attention",
    "importance_heatmap", "learnable_adjacency", "load_checkpoint",
    "load_dataset", "mse_loss", "preprocess", "record", "render_grayscale",
    "render_overlay", "saliency_map", "save_checkpoint",
    "scaled_dot_attention", "set_debug", "spatial_adjacency", "split",
    "temperature_of_index", "train",
]
