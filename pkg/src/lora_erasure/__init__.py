"""Per-concept LoRA erasure adapters with orthogonality constraints on a toy diffusion model."""

from .attention import AttentionWeights, LoraAdapter, WeightDelta, attention_output, induced_shift
from .composition import ErasureRequest, composite_predict, erase_sample, merge_adapters, switch_predict
from .diffusion import NEUTRAL, ConceptWorld, Denoiser, ddim_sample, make_world, train_base
from .evaluation import (
    acc_ee,
    acc_up,
    classify,
    distribution_distance,
    harmonic_accuracy,
    load_taxonomy,
    run_experiment,
)
from .orthogonality import orthogonality_score, orthogonality_oracle
from .training import TrainingConfig, train_scope

__all__ = [
    "AttentionWeights", "LoraAdapter", "WeightDelta", "attention_output", "induced_shift",
    "ErasureRequest", "composite_predict", "erase_sample", "merge_adapters", "switch_predict",
    "NEUTRAL", "ConceptWorld", "Denoiser", "ddim_sample", "make_world", "train_base",
    "acc_ee", "acc_up", "classify", "distribution_distance", "harmonic_accuracy", "load_taxonomy",
    "run_experiment", "orthogonality_score", "orthogonality_oracle", "TrainingConfig", "train_scope",
]
