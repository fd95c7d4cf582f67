"""Scenario definitions, traffic generators, metrics and variant comparison."""

from .apps import FlowMeter, MetricSample
from .builtin import VARIANTS, apply_variant, builtin_scenarios, get_scenario
from .compare import (
    bytes_between,
    compare_runs,
    default_windows,
    mean_delay_ms,
    mean_goodput,
    summarize,
)
from .config import ConfigError, ScenarioConfig
from .runner import RunResult, build_network, run_scenario

__all__ = [
    "ConfigError", "FlowMeter", "MetricSample", "RunResult", "ScenarioConfig", "VARIANTS",
    "apply_variant", "build_network", "builtin_scenarios", "bytes_between", "compare_runs",
    "default_windows", "get_scenario", "mean_delay_ms", "mean_goodput", "run_scenario",
    "summarize",
]
