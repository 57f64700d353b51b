"""xflow: train sequence classifiers over network-traffic units and explain
their predictions with budgeted sigmoid masks, gradient/surrogate baselines
and fidelity-style metrics."""

from .data import (KIND_BYTES, KIND_RTT, PAD_TOKEN, VOCAB_SIZE, LabeledDataset,
                   SyntheticSpec, TracerouteRecord, UnitSequence, Vocabulary,
                   generate_synthetic, ingest_traceroute, load_jsonl,
                   make_sequence, pad_truncate, save_jsonl, save_labels,
                   split_dataset)
from .errors import DivergenceError, ParseError, ValidationError, XflowError
from .explain import (ExplainerConfig, ExplanationReport, MaskParams, MaskSpec,
                      derive_seed, mask_l1, masked_predict, objective_confidence,
                      objective_global, objective_label, optimize_mask,
                      select_topk, total_loss)
from .model import (ClassifierConfig, ModelParams, PredictionDistribution,
                    TrainConfig, embed_units, encode, load_checkpoint,
                    pool_and_classify, predict_batch, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "KIND_BYTES", "KIND_RTT", "PAD_TOKEN", "VOCAB_SIZE",
    "LabeledDataset", "SyntheticSpec", "TracerouteRecord", "UnitSequence", "Vocabulary",
    "generate_synthetic", "ingest_traceroute", "load_jsonl", "make_sequence",
    "pad_truncate", "save_jsonl", "save_labels", "split_dataset",
    "DivergenceError", "ParseError", "ValidationError", "XflowError",
    "ExplainerConfig", "ExplanationReport", "MaskParams", "MaskSpec",
    "derive_seed", "mask_l1", "masked_predict", "objective_confidence",
    "objective_global", "objective_label", "optimize_mask", "select_topk", "total_loss",
    "ClassifierConfig", "ModelParams", "PredictionDistribution", "TrainConfig",
    "embed_units", "encode", "load_checkpoint", "pool_and_classify",
    "predict_batch", "save_checkpoint", "train",
    "__version__",
]
