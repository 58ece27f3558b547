"""Config-driven orchestration and the command-line interface."""

from .config import ExperimentConfig, config_hash, load_config, load_preset, parse_seeds, resolve
from .runner import RunManifest, compare, run_baseline_pair, run_full, run_id

__all__ = ["ExperimentConfig", "RunManifest", "compare", "config_hash", "load_config",
           "load_preset", "parse_seeds", "resolve", "run_baseline_pair", "run_full", "run_id"]
