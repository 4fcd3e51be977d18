"""Disentangled E(3)-equivariant Wasserstein autoencoder for 3D fragment graphs."""

from .estimator import E3WAE, infer_vocab
from .exceptions import (
    ContractViolation,
    DomainError,
    E3WAEError,
    GenerationError,
    NonFiniteLossError,
    ParseError,
    ShapeError,
    UndefinedPropertyError,
    UnsupportedVersionError,
    ValidationError,
)
from .generation import FragmentCountSampler, GenerationRequest, generate, sample_latents
from .model import LatentState, ModelConfig
from .molgraph import (
    AtomGraph,
    FragmentGraph3D,
    FragmentVocab,
    SynthConfig,
    fragmentize,
    make_vocab,
    read_jsonl,
    synth_dataset,
    write_jsonl,
)
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "E3WAE",
    "infer_vocab",
    "ContractViolation",
    "DomainError",
    "E3WAEError",
    "GenerationError",
    "NonFiniteLossError",
    "ParseError",
    "ShapeError",
    "UndefinedPropertyError",
    "UnsupportedVersionError",
    "ValidationError",
    "FragmentCountSampler",
    "GenerationRequest",
    "generate",
    "sample_latents",
    "LatentState",
    "ModelConfig",
    "AtomGraph",
    "FragmentGraph3D",
    "FragmentVocab",
    "SynthConfig",
    "fragmentize",
    "make_vocab",
    "read_jsonl",
    "synth_dataset",
    "write_jsonl",
    "TrainConfig",
    "train",
]
