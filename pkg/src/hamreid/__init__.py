"""Hybrid-attention, multi-granularity person re-identification on a small numpy autodiff core."""
from .attention import AttentionConfig, Ordering
from .backbone import BackboneConfig, FusionConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .heads import MgoConfig, MpfeConfig
from .metrics import EmbeddingSet, evaluate
from .model import Model, ModelConfig
from .tensor import Tape, Tensor
from .training import TrainConfig, train_loop

__all__ = [
    "AttentionConfig", "BackboneConfig", "EmbeddingSet", "FusionConfig", "MgoConfig",
    "MpfeConfig", "Model", "ModelConfig", "Ordering", "RunConfig", "Tape", "Tensor",
    "TrainConfig", "evaluate", "load_checkpoint", "load_config", "save_checkpoint", "train_loop",
]
__version__ = "0.1.0"
