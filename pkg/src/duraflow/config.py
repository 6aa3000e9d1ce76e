"""Run configuration dataclasses and their JSON form."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .errors import ConfigInvalid
from .runtime import MODES


@dataclass(frozen=True)
class Timing:
    step_us: int = 100
    task_min_us: int = 1_000
    task_max_us: int = 5_000
    hop_us: int = 1_000
    flush_every_us: int = 2_000
    flush_override_us: dict[str, int] = field(default_factory=dict)  # partition id -> period
    lease_ttl_us: int = 10_000_000
    lease_renew_us: int = 3_000_000
    checkpoint_every_events: int = 256
    checkpoint_every_us: int = 10_000_000
    restart_us: int = 200_000
    resend_after_us: int = 500_000

    def flush_period(self, pid: int) -> int:
        return self.flush_override_us.get(str(pid), self.flush_every_us)


@dataclass(frozen=True)
class Faults:
    crash_rate: float = 0.0        # chance per node action, until the cutoff
    crash_until_frac: float = 0.8  # fraction of the horizon with faults armed
    crashes_at: tuple = ()         # scripted: ((virtual_us, node_name), ...)


@dataclass(frozen=True)
class Scaleout:
    at_us: int
    nodes_after: int


@dataclass(frozen=True)
class SimConfig:
    workload: str = "hello"
    requests: int = 10
    seed: int = 1
    mode: str = "conservative"
    partitions: int = 8
    nodes: int = 1
    workers_per_node: int = 2
    arrival_interval_us: int = 0   # 0: everything lands at t=0
    closed_loops: int = 0          # >0: that many loop clients drive arrivals instead
    horizon_us: int = 2_000_000    # fault window basis
    deadline_us: int = 120_000_000  # give up and report incomplete
    timing: Timing = field(default_factory=Timing)
    faults: Faults = field(default_factory=Faults)
    scaleout: Scaleout | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigInvalid(f"unknown mode {self.mode!r}, want one of {MODES}")
        if self.partitions < 1 or self.nodes < 1 or self.workers_per_node < 1:
            raise ConfigInvalid("partitions, nodes and workers must be positive")
        if self.requests < 0 or self.horizon_us <= 0:
            raise ConfigInvalid("requests must be >= 0 and horizon positive")
        if self.closed_loops < 0:
            raise ConfigInvalid("closed_loops must be >= 0")


def _dataclass_from(cls, obj: dict):
    known = {f.name for f in fields(cls)}
    extra = set(obj) - known
    if extra:
        raise ConfigInvalid(f"unknown {cls.__name__} keys: {sorted(extra)}")
    return cls(**obj)


def config_from_obj(obj: dict) -> SimConfig:
    obj = dict(obj)
    if "timing" in obj:
        obj["timing"] = _dataclass_from(Timing, obj["timing"])
    if "faults" in obj:
        obj["faults"] = _dataclass_from(Faults, obj["faults"])
    if obj.get("scaleout") is not None:
        obj["scaleout"] = _dataclass_from(Scaleout, obj["scaleout"])
    return _dataclass_from(SimConfig, obj)


def load_config(path: str) -> SimConfig:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"{path}: {e}") from None
    if not isinstance(obj, dict):
        raise ConfigInvalid(f"{path}: top level must be an object")
    return config_from_obj(obj)
