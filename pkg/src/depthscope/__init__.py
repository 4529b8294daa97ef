"""Effective-depth profiling for pre-norm transformers."""

__version__ = "0.1.0"

from .corpus import BaselineStats, PromptRecord, byte_tokenize, compute_baseline, load_jsonl
from .detectors import DepthEstimate, DetectorConfig, ed_from_cosine, ed_from_kl, ed_from_overlap, ratio
from .errors import DepthscopeError, FormatError, InputError, ShapeError, TapeLookupError
from .model import InterventionSpec, LayerTrace, ModelConfig, ModelWeights, forward, init_random, preset
from .container import load_weights, save_weights

__all__ = [
    "__version__",
    "BaselineStats",
    "DepthEstimate",
    "DepthscopeError",
    "DetectorConfig",
    "FormatError",
    "InputError",
    "InterventionSpec",
    "LayerTrace",
    "ModelConfig",
    "ModelWeights",
    "PromptRecord",
    "ShapeError",
    "TapeLookupError",
    "byte_tokenize",
    "compute_baseline",
    "ed_from_cosine",
    "ed_from_kl",
    "ed_from_overlap",
    "forward",
    "init_random",
    "load_jsonl",
    "load_weights",
    "preset",
    "ratio",
    "save_weights",
]
