"""The simulated cluster: determinism, mode behavior, faults, scale-out."""
from __future__ import annotations

import pytest

from duraflow import model
from duraflow.config import Faults, Scaleout, SimConfig, Timing
from duraflow.sim import simulate
from duraflow.messages import partition_of
from duraflow.workloads import req_id


def small(workload="hello", **kw):
    defaults = dict(workload=workload, requests=3, seed=11, partitions=4, nodes=2)
    defaults.update(kw)
    return SimConfig(**defaults)


def test_hello_completes_and_checks_green():
    sim = simulate(small(), paranoid=True)
    assert sim.finished and not sim.gave_up
    assert sim.check() == []
    assert sim.reports[req_id(0)] == ["hello alpha", "hello beta", "hello gamma"]


def test_conservative_hello_waits_seven_times_per_request():
    # three task dispatches + three results + the report, each parked on a flush
    sim = simulate(small(requests=1, mode="conservative"))
    assert sim.check() == []
    assert sim.metrics.requests[req_id(0)].flush_waits == 7


def test_local_hello_waits_once_per_request():
    # only the completion report has to wait for durability
    sim = simulate(small(requests=1, mode="local"))
    assert sim.check() == []
    assert sim.metrics.requests[req_id(0)].flush_waits == 1


def test_local_halves_median_latency_on_ten_task_sequence():
    # trivial activities, so batching delay dominates the conservative path
    from duraflow.metrics import median

    t = Timing(task_min_us=500, task_max_us=1500)
    lat = {}
    for mode in ("conservative", "local"):
        sim = simulate(small(workload="seq10", requests=5, mode=mode, seed=3,
                             timing=t, horizon_us=5_000_000))
        assert sim.check() == []
        lat[mode] = median(sim.metrics.latencies())
    assert lat["local"] * 2 <= lat["conservative"]


def test_same_seed_same_bytes(tmp_path):
    from duraflow.metrics import write_metrics_csv

    def run(tag):
        sim = simulate(small(workload="bank", requests=12, seed=42, mode="global"))
        trace = tmp_path / f"trace-{tag}.txt"
        csvp = tmp_path / f"metrics-{tag}.csv"
        model.write_trace(sim.recorder.graph, str(trace))
        write_metrics_csv(str(csvp), sim.metrics)
        return trace.read_bytes(), csvp.read_bytes(), dict(sim.reports)

    t1, m1, r1 = run("a")
    t2, m2, r2 = run("b")
    assert t1 == t2 and m1 == m2 and r1 == r2


def test_different_seeds_schedule_differently():
    a = simulate(small(requests=4, seed=1))
    b = simulate(small(requests=4, seed=2))
    assert a.metrics.latencies() != b.metrics.latencies()


def test_bank_with_crashes_stays_consistent():
    cfg = small(workload="bank", requests=30, mode="global", seed=9,
                partitions=4, nodes=2, horizon_us=30_000_000,
                faults=Faults(crash_rate=0.002))
    sim = simulate(cfg, paranoid=True)
    assert sim.finished, f"gave up at {sim.now}us with {len(sim.reports)} reports"
    assert sim.check() == []
    assert sim.metrics.crashes > 0, "fault injection never fired; rate too low for the run"
    assert any(v.progress == model.ABORTED for v in sim.recorder.graph.vertices.values())


def test_crash_free_seed_zero_faults():
    cfg = small(workload="seq", requests=5, faults=Faults(crash_rate=0.0))
    sim = simulate(cfg)
    assert sim.metrics.crashes == 0
    assert sim.check() == []


def test_scaleout_moves_partitions_and_finishes():
    cfg = SimConfig(workload="counter", requests=40, seed=5, mode="local",
                    partitions=8, nodes=1, arrival_interval_us=20_000,
                    scaleout=Scaleout(at_us=300_000, nodes_after=2))
    sim = simulate(cfg, paranoid=True)
    assert sim.finished
    assert sim.check() == []
    assert sim.scaleout_moves == 4   # quota 4+4: the survivor keeps half
    owners = {sim.assignment[p] for p in range(8)}
    assert owners == {"n0", "n1"}


def test_deadline_reports_incomplete():
    cfg = small(requests=2, deadline_us=1_500)  # too tight for any flush
    sim = simulate(cfg)
    assert sim.gave_up and not sim.finished
    assert any("incomplete" in v for v in sim.check())


def test_per_partition_flush_override_slows_only_that_partition():
    # requests homed on the 25x-slower partition pay its flush cadence
    t = Timing(flush_override_us={"0": 50_000})
    sim = simulate(small(requests=6, seed=8, timing=t, horizon_us=10_000_000))
    assert sim.check() == []
    on_slow, on_fast = [], []
    for i in range(6):
        m = sim.metrics.requests[req_id(i)]
        home = partition_of(sim.requests[i].instance, 4)
        (on_slow if home == 0 else on_fast).append(m.latency_us)
    assert on_slow and on_fast
    assert min(on_slow) > 5 * max(on_fast)


def test_closed_loop_drives_arrivals_from_completions():
    cfg = small(workload="counter", requests=20, closed_loops=4, seed=6)
    sim = simulate(cfg)
    assert sim.finished and sim.check() == []
    # never more than 4 requests in flight: the 5th submission postdates
    # the 1st report
    subs = sorted(m.submitted_us for m in sim.metrics.requests.values())
    first_report = min(m.reported_us for m in sim.metrics.requests.values())
    assert subs[4] >= first_report


def test_closed_loop_runs_are_still_deterministic():
    runs = [simulate(small(workload="seq", requests=12, closed_loops=3, seed=21))
            for _ in range(2)]
    a, b = (model.trace_lines(s.recorder.graph) for s in runs)
    assert a == b
