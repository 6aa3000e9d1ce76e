"""Run measurements and their on-disk formats.

metrics.csv is a fixed six-column table `kind,key,a,b,c,d` so one file can
mix row shapes without a schema dance:

    request,<req>,<submit_us>,<report_us>,<latency_us>,<flush_waits>
    throughput,<second>,<completions>,,,
    flushes,<partition>,<count>,,,
    rewinds,<partition>,<count>,,,
    crashes,total,<count>,,,
    summary,latency_us,<p50>,<p90>,<mean>,<n>

ecdf.csv plots the latency distribution as `fraction,value_us` with rank/n
fractions, so the last row is exactly 1.0.

Everything recorded is simulated time or a counter; same seed, same bytes.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .errors import EmptySample
from .runtime import Observer


def median(values: list[float]) -> float:
    return percentile(values, 0.5)


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile; q in [0, 1]."""
    if not values:
        raise EmptySample("percentile of an empty sample")
    ordered = sorted(values)
    rank = min(len(ordered), max(1, math.ceil(q * len(ordered))))
    return ordered[rank - 1]


@dataclass
class RequestMetric:
    req: str
    submitted_us: int
    reported_us: int | None = None
    flush_waits: int = 0

    @property
    def latency_us(self) -> int | None:
        if self.reported_us is None:
            return None
        return self.reported_us - self.submitted_us


@dataclass
class MetricsCollector(Observer):
    """Counts flushes/rewinds from the runtime and request lifecycle from the driver."""
    requests: dict[str, RequestMetric] = field(default_factory=dict)
    flushes: dict[int, int] = field(default_factory=dict)
    rewinds: dict[int, int] = field(default_factory=dict)
    crashes: int = 0

    def on_flush(self, pid: int, upto: int) -> None:
        self.flushes[pid] = self.flushes.get(pid, 0) + 1

    def on_rewind(self, pid: int, rewind_to: int) -> None:
        self.rewinds[pid] = self.rewinds.get(pid, 0) + 1

    def on_parked_release(self, pid: int, req: str | None, kind: str) -> None:
        if req is not None and req in self.requests:
            self.requests[req].flush_waits += 1

    # driver-side hooks
    def submitted(self, req: str, now_us: int) -> None:
        self.requests[req] = RequestMetric(req, now_us)

    def reported(self, req: str, now_us: int) -> None:
        m = self.requests.get(req)
        if m is not None and m.reported_us is None:
            m.reported_us = now_us

    def crashed(self) -> None:
        self.crashes += 1

    def latencies(self) -> list[int]:
        return [m.latency_us for m in self.requests.values() if m.latency_us is not None]

    def throughput_by_second(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for m in self.requests.values():
            if m.reported_us is not None:
                sec = m.reported_us // 1_000_000
                out[sec] = out.get(sec, 0) + 1
        return out


def write_metrics_csv(path: str, collected: MetricsCollector) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "key", "a", "b", "c", "d"])
        for req in sorted(collected.requests):
            m = collected.requests[req]
            w.writerow(["request", req, m.submitted_us,
                        "" if m.reported_us is None else m.reported_us,
                        "" if m.latency_us is None else m.latency_us,
                        m.flush_waits])
        tput = collected.throughput_by_second()
        for sec in sorted(tput):
            w.writerow(["throughput", sec, tput[sec], "", "", ""])
        for pid in sorted(collected.flushes):
            w.writerow(["flushes", f"p{pid}", collected.flushes[pid], "", "", ""])
        for pid in sorted(collected.rewinds):
            w.writerow(["rewinds", f"p{pid}", collected.rewinds[pid], "", "", ""])
        w.writerow(["crashes", "total", collected.crashes, "", "", ""])
        lat = collected.latencies()
        if lat:
            mean = sum(lat) // len(lat)
            w.writerow(["summary", "latency_us", percentile(lat, 0.5),
                        percentile(lat, 0.9), mean, len(lat)])


def write_ecdf_csv(path: str, values: list[int]) -> None:
    if not values:
        raise EmptySample("ecdf of an empty sample")
    ordered = sorted(values)
    n = len(ordered)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "value_us"])
        for rank, v in enumerate(ordered, start=1):
            w.writerow([f"{rank / n:.6f}" if rank != n else "1.0", v])


def read_metrics_csv(path: str) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[1:]
