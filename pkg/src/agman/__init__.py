"""Attribute-guided multi-level attention for attribute-specific image retrieval."""
from .config import RunConfig, load_config
from .data import AttributeSpace, DatasetSplit, generate_synthetic, load_manifest
from .evaluation import EvalReport, evaluate_map, evaluate_triplets, retrieve
from .model import AGMAN, build_model
from .training import load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AGMAN", "AttributeSpace", "DatasetSplit", "EvalReport", "RunConfig", "build_model",
    "evaluate_map", "evaluate_triplets", "generate_synthetic", "load_checkpoint", "load_config",
    "load_manifest", "retrieve", "save_checkpoint", "train",
]
