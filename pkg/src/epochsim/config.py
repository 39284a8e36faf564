"""Simulator configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

LINE_SIZE = 64
PAGE_SIZE = 256
LINES_PER_PAGE = PAGE_SIZE // LINE_SIZE


class ConfigError(ValueError):
    pass


class InfeasibleCL(ConfigError):
    """Target checkpoint latency is at or below the cache-scrub floor."""


@dataclass
class SimConfig:
    # Defaults are desk scale: frequency is scaled down so that millisecond
    # targets map onto tens of thousands of simulated cycles.
    core_count: int = 4
    frequency_hz: int = 3_200_000
    noc_width: int = 3
    noc_height: int = 3
    link_delay: int = 1
    link_delays: dict = field(default_factory=dict)  # (a, b) -> cycles override
    side_channel_latency: int = 0  # 0 -> max link delay
    report_interval: int = 16

    l1_sets: int = 16
    l1_ways: int = 2
    l1_latency: int = 1
    l2_sets: int = 32
    l2_ways: int = 4
    l2_latency: int = 2
    llc_sets: int = 64
    llc_ways: int = 4
    llc_latency: int = 4
    dir_latency: int = 1
    dram_latency: int = 20
    nvm_latency: int = 40
    nvm_banks: int = 8

    epoch_size_cycles: int = 100_000
    cl_target_seconds: float = 0.005
    timer_enabled: bool = True
    cl_min_estimate_cycles: int = 0  # 0 -> derived from cache geometry

    scrubbing_step: int = 20
    scrubbing_granularity: int = 1
    memory_walk_step: int = 1000
    walk_step_min: int = 16
    walk_step_max: int = 262_144
    predictor_rate_min: int = 512
    predictor_rate_max: int = 262_144
    sub_epochs: int = 50
    predictor: str = "adaptive"  # adaptive | off | always | perfect
    scheduler_enabled: bool = True
    scheduler_entries: int = 16
    node_cache_entries: int = 3
    table_node_limit: int = 1 << 16
    commit_margin: int = 0  # 0 -> derived

    op_gap: int = 0
    seed: int = 0
    directive_core: int = 0
    controller_node: int = 0
    directory_node: int = -1  # -1 -> last node
    mc_node: int = -1  # -1 -> centre node

    strict: bool = True
    debug_checks: bool = False
    observe_noc: bool = False
    mutation: str = ""  # "", token_bypass, no_dir_adjust, short_window

    def __post_init__(self) -> None:
        self.validate()

    @property
    def node_count(self) -> int:
        return self.noc_width * self.noc_height

    @property
    def dir_node(self) -> int:
        return self.directory_node if self.directory_node >= 0 else self.node_count - 1

    @property
    def memory_node(self) -> int:
        if self.mc_node >= 0:
            return self.mc_node
        return (self.noc_height // 2) * self.noc_width + self.noc_width // 2

    @property
    def cl_cycles(self) -> int:
        return int(round(self.cl_target_seconds * self.frequency_hz))

    @property
    def max_link_delay(self) -> int:
        return max([self.link_delay, *self.link_delays.values()])

    @property
    def side_latency(self) -> int:
        return self.side_channel_latency or self.max_link_delay

    def validate(self) -> None:
        if PAGE_SIZE % LINE_SIZE:
            raise ConfigError("line size must divide page size")
        if self.core_count < 1 or self.core_count > self.node_count:
            raise ConfigError(
                f"core_count={self.core_count} must be in 1..{self.node_count}")
        if self.noc_width < 1 or self.noc_height < 1 or self.node_count < 2:
            raise ConfigError("NoC needs at least two routers")
        lat = ["link_delay", "l1_latency", "l2_latency", "llc_latency",
               "dir_latency", "dram_latency", "nvm_latency", "nvm_banks"]
        for name in lat:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1 cycle")
        if any(d < 1 for d in self.link_delays.values()):
            raise ConfigError("link delays must be >= 1 cycle")
        for name in ("scrubbing_step", "scrubbing_granularity", "memory_walk_step",
                     "report_interval", "sub_epochs", "epoch_size_cycles"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.predictor_rate_min <= self.predictor_rate_max:
            raise ConfigError("predictor rate range is empty")
        if not 1 <= self.walk_step_min <= self.walk_step_max:
            raise ConfigError("walk step range is empty")
        if self.predictor not in ("adaptive", "off", "always", "perfect"):
            raise ConfigError(f"unknown predictor mode {self.predictor!r}")
        if self.mutation not in ("", "token_bypass", "no_dir_adjust", "short_window"):
            raise ConfigError(f"unknown mutation {self.mutation!r}")
        if self.cl_cycles <= 0:
            raise InfeasibleCL(f"CL={self.cl_target_seconds}s is not positive")
        if self.cl_cycles >= self.epoch_size_cycles:
            raise ConfigError("CL in cycles must be below the epoch size")
        for name in ("controller_node", "dir_node", "memory_node"):
            if not 0 <= getattr(self, name) < self.node_count:
                raise ConfigError(f"{name} out of range")
        if not 0 <= self.directive_core < self.core_count:
            raise ConfigError("directive_core out of range")

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw, 0)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, dict):
        out = {}
        for item in filter(None, (s.strip() for s in raw.split(";"))):
            pair, _, delay = item.partition(":")
            a, _, b = pair.partition("-")
            out[(int(a), int(b))] = int(delay)
        return out
    return raw


def parse_config(text: str, base: SimConfig | None = None) -> SimConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    ``link_delays`` uses ``a-b:d;c-d:e`` for per-link overrides.
    """
    base = base or SimConfig()
    defaults = dataclasses.asdict(base)
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in defaults:
            raise ConfigError(f"line {lineno}: bad config entry {line!r}")
        try:
            changes[key] = _coerce(key, value.strip(), defaults[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return dataclasses.replace(base, **changes)


def load_config(path: str | Path) -> SimConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: SimConfig) -> str:
    lines = []
    for key, value in dataclasses.asdict(cfg).items():
        if isinstance(value, dict):
            value = ";".join(f"{a}-{b}:{d}" for (a, b), d in sorted(value.items()))
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
