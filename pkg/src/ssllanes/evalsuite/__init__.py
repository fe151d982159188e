"""Forecast metrics, representation similarity, noise injection and the generalization harness."""

from .cka import cka, cka_matrix, write_matrix_csv
from .metrics import (
    MISS_THRESHOLD,
    MetricReport,
    brier_min_fde,
    evaluate,
    min_ade,
    min_fde,
    miss_rate,
    mode_errors,
    top_k,
)
from .noise import inject_noise
from .suite import (
    RECIPES,
    SETTINGS,
    MissingTagsError,
    eval_set,
    evaluate_model,
    format_table,
    generalization_suite,
    require_tags,
    train_suite_models,
    training_set,
    write_rows_csv,
)

__all__ = [
    "MISS_THRESHOLD", "MetricReport", "MissingTagsError", "RECIPES", "SETTINGS",
    "brier_min_fde", "cka", "cka_matrix", "eval_set", "evaluate", "evaluate_model",
    "format_table", "generalization_suite", "inject_noise", "min_ade", "min_fde",
    "miss_rate", "mode_errors", "require_tags", "top_k", "train_suite_models",
    "training_set", "write_matrix_csv", "write_rows_csv",
]
