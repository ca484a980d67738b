"""Decomposed formant/excitation text-to-mel synthesis with explicit pitch control."""

from .control import DEFAULT_LAMBDAS, shift_pitch, sweep, synthesize
from .data import CorpusConfig, F0Track, PhonemeUtterance, generate_corpus
from .metrics import ffe, mcd
from .model import FormantExcitationModel, ModelConfig
from .tensor import Tensor, backward, grad_check
from .training import TrainConfig, compute_loss, train

__all__ = [
    "CorpusConfig", "DEFAULT_LAMBDAS", "F0Track", "FormantExcitationModel", "ModelConfig",
    "PhonemeUtterance", "Tensor", "TrainConfig", "backward", "compute_loss", "ffe",
    "generate_corpus", "grad_check", "mcd", "shift_pitch", "sweep", "synthesize", "train",
]
