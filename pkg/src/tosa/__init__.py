"""Token-selective attention (ToSA) for vision transformers, in plain numpy."""

from .model import ModelConfig, ModelState, forward, init_model, load_checkpoint, save_checkpoint
from .selector import SelectionPlan, predict_attention, select_tokens, selection_k
from .tosa_layer import SkipScope

__version__ = "0.1.0"
