"""Checkpoint merging, weight quantization, sequence packing and MCQA evaluation."""

__version__ = "0.1.0"

from .bench_data import McqaItem, PromptTemplate, TEMPLATES, load_dataset, render_prompt, sample_few_shots
from .evaluation import EvalReport, MCQAEvaluator, accuracy_stats, ece, render_report, run_eval
from .merge import (
    CheckpointMerger,
    MergeRecipe,
    TaskVector,
    dare_merge,
    dare_sparsify,
    linear_merge,
    slerp_merge,
    task_vector,
    ties_merge,
)
from .pack import PackStats, SequencePacker, pack_stream, packing_stats
from .quantize import (
    QuantCheckpoint,
    QuantSpec,
    WeightQuantizer,
    awq_quantize,
    awq_scales,
    dequantize,
    footprint_report,
    rtn_quantize,
)
from .scoring import (
    EnsembleBackend,
    HashBackend,
    OptionScores,
    RemoteBackend,
    TableBackend,
    ensemble_scores,
    remote_scorer,
    score_options,
)
from .tensor_store import Checkpoint, Tensor, load_checkpoint, save_checkpoint, validate_compat
from .translate import DatasetTranslator, translate_dataset

__all__ = [
    "__version__",
    "accuracy_stats",
    "awq_quantize",
    "awq_scales",
    "Checkpoint",
    "CheckpointMerger",
    "dare_merge",
    "dare_sparsify",
    "DatasetTranslator",
    "dequantize",
    "ece",
    "ensemble_scores",
    "EnsembleBackend",
    "EvalReport",
    "footprint_report",
    "HashBackend",
    "linear_merge",
    "load_checkpoint",
    "load_dataset",
    "MCQAEvaluator",
    "McqaItem",
    "MergeRecipe",
    "OptionScores",
    "pack_stream",
    "packing_stats",
    "PackStats",
    "PromptTemplate",
    "QuantCheckpoint",
    "QuantSpec",
    "remote_scorer",
    "RemoteBackend",
    "render_prompt",
    "render_report",
    "rtn_quantize",
    "run_eval",
    "sample_few_shots",
    "save_checkpoint",
    "score_options",
    "SequencePacker",
    "slerp_merge",
    "TableBackend",
    "task_vector",
    "TaskVector",
    "TEMPLATES",
    "Tensor",
    "ties_merge",
    "translate_dataset",
    "validate_compat",
    "WeightQuantizer",
]
