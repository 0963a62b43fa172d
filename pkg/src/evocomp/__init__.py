"""Evolutionary search for per-layer neural-network compression settings."""

from .engine import EngineConfig, ScoreReport, compute_thresholds, evolve, score
from .evaluate import (
    BuiltinEvaluator,
    Dataset,
    ExternalEvaluatorPool,
    SyntheticEvaluator,
    SyntheticLandscape,
    load_dataset,
)
from .errors import (
    ConfigError,
    DecompositionError,
    EvalError,
    InfeasibleThresholdError,
    ModelFormatError,
    PlanError,
    ProtocolError,
    SchemaError,
    UnrepresentableRankError,
)
from .genome import (
    CompressionPlan,
    GenomeSchema,
    Prune,
    PruneDecompose,
    Svd,
    Tucker,
    build_schema,
    decode,
    encode,
)
from .model import LayerSpec, ModelSpec, TensorStore, load_model, model_flops, save_model

__version__ = "0.1.0"

__all__ = [
    "BuiltinEvaluator",
    "CompressionPlan",
    "ConfigError",
    "Dataset",
    "DecompositionError",
    "EngineConfig",
    "EvalError",
    "ExternalEvaluatorPool",
    "GenomeSchema",
    "InfeasibleThresholdError",
    "LayerSpec",
    "ModelFormatError",
    "ModelSpec",
    "PlanError",
    "ProtocolError",
    "Prune",
    "PruneDecompose",
    "SchemaError",
    "ScoreReport",
    "Svd",
    "SyntheticEvaluator",
    "SyntheticLandscape",
    "TensorStore",
    "Tucker",
    "UnrepresentableRankError",
    "build_schema",
    "compute_thresholds",
    "decode",
    "encode",
    "evolve",
    "load_dataset",
    "load_model",
    "model_flops",
    "save_model",
    "score",
]
