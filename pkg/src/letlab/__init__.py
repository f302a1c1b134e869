"""Desk-scale lab for late-to-early representation-aligned LM pretraining."""

from .alignment import AlignmentSpec, LayerPairStrategy
from .data import Corpus, MarkovSpec, gen_markov_corpus, tokenize_bytes
from .models import DeepLinearNet, ModelConfig, TransformerModel, init_params
from .tensor import Tape, Tensor, backward, grad_check, no_grad
from .trainer import TrainConfig, run

__version__ = "0.1.0"

__all__ = [
    "AlignmentSpec", "LayerPairStrategy", "Corpus", "MarkovSpec",
    "gen_markov_corpus", "tokenize_bytes", "DeepLinearNet", "ModelConfig",
    "TransformerModel", "init_params", "Tape", "Tensor", "backward",
    "grad_check", "no_grad", "TrainConfig", "run",
]
