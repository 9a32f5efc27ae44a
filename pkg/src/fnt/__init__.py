"""Factorized neural transducer with long-content context, desk scale.

A numpy implementation of a factorized transducer ASR system: a blank
predictor and a standalone language-model vocabulary predictor joined over an
alignment lattice, with long-content extensions that feed history transcripts
and history speech into both offline and streaming decoders.  Hot lattice
recursions are JIT-compiled with numba when available (set ``FNT_NUMBA=0``
for the pure-numpy path).
"""

from .config import ExperimentConfig
from .corpus import Dataset, GeneratorConfig, generate_dataset, load_dataset, save_dataset
from .decoder import DecodeConfig, beam_decode, greedy_decode, streaming_decode
from .encoder import EncoderConfig, FeatureSeq
from .harness import Metrics, evaluate, measure_latency, stream_evaluate, train, wer
from .model import FntModel, ModelConfig
from .rng import Rng
from .tensor import Tensor, grad_check, no_grad, set_default_dtype

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "Dataset",
    "GeneratorConfig",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
    "DecodeConfig",
    "beam_decode",
    "greedy_decode",
    "streaming_decode",
    "EncoderConfig",
    "FeatureSeq",
    "Metrics",
    "evaluate",
    "measure_latency",
    "stream_evaluate",
    "train",
    "wer",
    "FntModel",
    "ModelConfig",
    "Rng",
    "Tensor",
    "grad_check",
    "no_grad",
    "set_default_dtype",
    "__version__",
]
