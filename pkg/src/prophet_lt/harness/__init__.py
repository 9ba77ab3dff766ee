"""Experiment configuration, orchestration, persistence and reporting."""

from .config import ExperimentConfig, config_from_dict, parse_config, validate_config
from .report import emit_comparison_table, emit_method_table, emit_placement_table
from .runner import (
    RunSummary,
    ablation_gn_placement,
    run_experiment,
    run_method_comparison,
    summarize_run,
)
