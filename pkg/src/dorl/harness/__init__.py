"""Experiment orchestration: config, splits, staged pipeline, ablation and sweep."""
from .config import (VARIANTS, ExperimentConfig, dump_config, load_config, parse_config)
from .pipeline import (canonical_json, check_no_leakage, classify_source, load_datasets,
                       recompute_aggregates, run_ablation, run_pipeline, write_report)
from .splits import stratified_kfold, stratified_split
from .sweep import DEFAULT_BETAS, DEFAULT_LAMS, sweep

__all__ = ["VARIANTS", "ExperimentConfig", "dump_config", "load_config", "parse_config",
           "canonical_json", "check_no_leakage", "classify_source", "load_datasets",
           "recompute_aggregates", "run_ablation", "run_pipeline", "write_report",
           "stratified_kfold", "stratified_split", "DEFAULT_BETAS", "DEFAULT_LAMS", "sweep"]
