"""Deterministic simulator of epoch-based checkpointing to NVM on a torus NoC."""

from .config import ConfigError, InfeasibleCL, SimConfig, load_config, parse_config
from .simulator import CrashPlan, RunResult, Simulator, simulate
from .trace import gen_trace, parse_trace, read_trace

__all__ = [
    "ConfigError", "InfeasibleCL", "SimConfig", "load_config", "parse_config",
    "CrashPlan", "RunResult", "Simulator", "simulate",
    "gen_trace", "parse_trace", "read_trace",
]
__version__ = "0.1.0"
