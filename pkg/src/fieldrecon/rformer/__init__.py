"""Decoder-only transformer for field reconstruction."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .estimator import RFormerReconstructor
from .inference import reconstruct_chunked
from .model import ModelConfig, RFormer, build_mask, build_tokens
from .training import TrainConfig, train

__all__ = ["Checkpoint", "load_checkpoint", "save_checkpoint", "RFormerReconstructor",
           "reconstruct_chunked", "ModelConfig", "RFormer", "build_mask", "build_tokens",
           "TrainConfig", "train"]
