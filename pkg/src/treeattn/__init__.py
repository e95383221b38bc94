"""Tree-structured attention with hierarchical accumulation, on a small numpy autodiff core."""

from .accumulation import HierEmbedTable, accumulate, build_hier_embeddings, interpolate, upward_cumavg, weighted_aggregate
from .attention import (
    AttentionParams,
    PhiParams,
    build_subtree_mask,
    decoder_cross_attention,
    encoder_tree_self_attention,
    standard_attention,
)
from .checkpoint import Checkpoint
from .model import ModelConfig, TreeTransformer, build_encoder, classify, count_parameters, preset, seq2seq_forward
from .tensor import Tape, Tensor, backward, finite_diff_check
from .train import TrainPlan, evaluate_accuracy, grad_check_model, train_classifier
from .treebank import ParseTree, TreeEncoding, decode_tree, encode_tree, parse_bracketed, validate

__version__ = "0.1.0"

__all__ = [
    "AttentionParams", "Checkpoint", "HierEmbedTable", "ModelConfig", "ParseTree", "PhiParams", "Tape", "Tensor",
    "TrainPlan", "TreeEncoding", "TreeTransformer", "accumulate", "backward", "build_encoder",
    "build_hier_embeddings", "build_subtree_mask", "classify", "count_parameters", "decode_tree",
    "decoder_cross_attention", "encode_tree", "encoder_tree_self_attention", "evaluate_accuracy",
    "finite_diff_check", "grad_check_model", "interpolate", "parse_bracketed", "preset", "seq2seq_forward",
    "standard_attention", "train_classifier", "upward_cumavg", "validate", "weighted_aggregate",
]
