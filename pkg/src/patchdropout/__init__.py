"""PatchDropout for Vision Transformers: sampler, ViT, cost model and experiment drivers."""

__version__ = "0.1.0"

from .cost import activation_memory, cost_report, empirical_flops, relative_compute, theoretical_flops
from .data import Dataset, load_dataset, make_synthetic, save_dataset
from .model import ModelConfig, forward, init_params, predict, variant
from .sampler import KeepSet, SamplingSpec, apply_dropout, draw_keep_set, draw_rate
from .tokenizer import ImageBatch, TokenBatch, embed_tokens, patchify
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "ModelConfig",
    "SamplingSpec",
    "KeepSet",
    "TrainConfig",
    "Dataset",
    "ImageBatch",
    "TokenBatch",
    "activation_memory",
    "apply_dropout",
    "cost_report",
    "draw_keep_set",
    "draw_rate",
    "embed_tokens",
    "empirical_flops",
    "evaluate",
    "forward",
    "init_params",
    "load_dataset",
    "make_synthetic",
    "patchify",
    "predict",
    "relative_compute",
    "save_dataset",
    "theoretical_flops",
    "train",
    "variant",
]
