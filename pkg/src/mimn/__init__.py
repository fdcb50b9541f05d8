"""Multi-turn inference matching network for natural language inference, on a
small numpy autodiff engine."""

from .data import Example, Vocabulary, generate_toy_corpus, load_dataset
from .model import ModelConfig, forward, init_params, predict
# the training loop stays at mimn.train.train so the submodule name is not shadowed
from .train import TrainConfig, evaluate, load_checkpoint, new_model, save_checkpoint
from .verify import count_params, gradcheck

__all__ = [
    "Example", "Vocabulary", "generate_toy_corpus", "load_dataset",
    "ModelConfig", "forward", "init_params", "predict",
    "TrainConfig", "evaluate", "load_checkpoint", "new_model", "save_checkpoint",
    "count_params", "gradcheck",
]
