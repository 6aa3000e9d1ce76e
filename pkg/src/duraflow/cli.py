"""Command-line driver: seeded runs, trace verification, the scale-out experiment.

Thin by design: engine behavior lives in the runtime and the simulator; this
module loads a config, calls simulate(), writes the output files, and prints a
summary. Configs are JSON objects or key=value lines (dots nest, so
`faults.crash_rate=0.002` works); both map onto SimConfig. `rebalance_at` is
sugar: start on one node, spread across `nodes` at that virtual time.

Outputs in --out: trace.txt (execution graph), metrics.csv, ecdf.csv.
Exit codes: 0 clean, 1 violations or incomplete run, 2 bad input.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import model
from .config import SimConfig, config_from_obj
from .errors import ConfigInvalid, EmptySample, TraceFormatError
from .metrics import percentile, read_metrics_csv, write_ecdf_csv, write_metrics_csv
from .sim import simulate


# --- config files -------------------------------------------------------------

def _coerce(val: str):
    for conv in (int, float):
        try:
            return conv(val)
        except ValueError:
            pass
    if val in ("true", "false"):
        return val == "true"
    return val


def _parse_kv(text: str) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, val = line.partition("=")
        if not eq:
            raise ConfigInvalid(f"line {lineno}: want key=value, got {line!r}")
        tgt = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            tgt = tgt.setdefault(p, {})
            if not isinstance(tgt, dict):
                raise ConfigInvalid(f"line {lineno}: {key.strip()!r} nests under a scalar")
        tgt[parts[-1]] = _coerce(val.strip())
    return out


def read_config_obj(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigInvalid(str(e)) from None
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"{path}: {e}") from None
    else:
        obj = _parse_kv(text)
    if not isinstance(obj, dict):
        raise ConfigInvalid(f"{path}: top level must be an object")
    return obj


def to_sim_config(obj: dict) -> SimConfig:
    obj = dict(obj)
    at = obj.pop("rebalance_at", None)
    if at is not None and obj.get("scaleout") is None:
        obj["scaleout"] = {"at_us": int(at), "nodes_after": int(obj.get("nodes", 1))}
        obj["nodes"] = 1
    return config_from_obj(obj)


# --- output -------------------------------------------------------------------

def _ms(us: float) -> str:
    return f"{us / 1000:.1f}ms"


def _write_outputs(sim, out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.write_trace(sim.recorder.graph, str(out / "trace.txt"))
    write_metrics_csv(str(out / "metrics.csv"), sim.metrics)
    lat = sim.metrics.latencies()
    if lat:
        write_ecdf_csv(str(out / "ecdf.csv"), lat)


def _print_summary(sim) -> None:
    lat = sim.metrics.latencies()
    n = len(sim.reports)
    line = f"completed {n}/{len(sim.requests)} requests"
    if lat:
        done = [m for m in sim.metrics.requests.values() if m.reported_us is not None]
        span_us = max(1, max(m.reported_us for m in done)
                      - min(m.submitted_us for m in done))
        rps = n / (span_us / 1_000_000)
        line += (f"  median {_ms(percentile(lat, 0.5))}"
                 f"  p95 {_ms(percentile(lat, 0.95))}"
                 f"  throughput {rps:.0f} req/s")
    if sim.metrics.crashes:
        line += f"  crashes {sim.metrics.crashes}"
    rewinds = sum(sim.metrics.rewinds.values())
    if rewinds:
        line += f"  rewinds {rewinds}"
    print(line)


def _finish_run(sim, out_dir: str) -> int:
    _write_outputs(sim, out_dir)
    _print_summary(sim)
    problems = sim.check()
    if problems:
        for p in problems:
            print(f"violation: {p}", file=sys.stderr)
        return 1
    return 0


# --- commands -------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = to_sim_config(read_config_obj(args.config))
    if args.realtime:
        from .realtime import run_realtime
        sim = run_realtime(cfg, workdir=str(Path(args.out) / "state"))
    else:
        sim = simulate(cfg, paranoid=args.paranoid)
    return _finish_run(sim, args.out)


def cmd_verify(args) -> int:
    try:
        text = Path(args.trace).read_text()
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if not any(ln.strip() and not ln.lstrip().startswith("#") for ln in text.splitlines()):
        print("OK: empty trace")
        return 0
    try:
        graph = model.parse_trace(text)
    except TraceFormatError as e:
        print(f"parse error: {args.trace}: {e}", file=sys.stderr)
        return 2
    violations = (model.check_consistency(graph).violations
                  + model.check_ccc_properties(graph).violations)
    if violations:
        for v in violations:
            print(v)
        print(f"FAIL: {len(violations)} violation(s)")
        return 1
    suffix = "complete" if graph.complete else "partial"
    print(f"OK: {len(graph.vertices)} vertices, {suffix} trace, no violations")
    return 0


SCALEOUT_DEFAULTS = {
    "workload": "hello",
    "mode": "local",
    "partitions": 32,
    "requests": 3000,
    "closed_loops": 64,
    "rebalance_at": 2_000_000,
    "horizon_us": 60_000_000,
}


def cmd_scaleout(args) -> int:
    obj = {**SCALEOUT_DEFAULTS, **read_config_obj(args.config)}
    nodes_after = int(obj.get("nodes", 4))
    if nodes_after not in (4, 8):
        raise ConfigInvalid(f"scaleout wants nodes in {{4, 8}}, got {nodes_after}")
    obj["nodes"] = nodes_after
    cfg = to_sim_config(obj)
    sim = simulate(cfg)
    move_us = cfg.scaleout.at_us
    tput = sim.metrics.throughput_by_second()
    pre = [tput.get(s, 0) for s in range(move_us // 1_000_000)]
    post = [tput.get(s, 0) for s in range(move_us // 1_000_000 + 1,
                                          max(tput, default=0) + 1)]
    print(f"moved {sim.scaleout_moves} of {cfg.partitions} partitions "
          f"to {nodes_after} nodes at {move_us / 1_000_000:.1f}s")
    if pre and post:
        print(f"throughput req/s: pre {max(pre)}  post {max(post)}  "
              f"ratio {max(post) / max(pre):.1f}x")
    return _finish_run(sim, args.out)


def cmd_ecdf(args) -> int:
    lat: list[int] = []
    for row in read_metrics_csv(args.metrics):
        if row and row[0] == "request" and row[4]:
            lat.append(int(row[4]))
    try:
        write_ecdf_csv(args.out, lat)
    except EmptySample:
        print(f"error: no completed requests in {args.metrics}", file=sys.stderr)
        return 2
    print(f"{args.out}: {len(lat)} samples, median {_ms(percentile(lat, 0.5))}, "
          f"p95 {_ms(percentile(lat, 0.95))}")
    return 0


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        prog="duraflow",
        description="Partitioned workflow engine: seeded runs, trace checks, experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a workload from a config file")
    p_run.add_argument("config", help="JSON or key=value config (SimConfig keys)")
    p_run.add_argument("--out", default=".", help="output directory (default: .)")
    p_run.add_argument("--paranoid", action="store_true",
                       help="re-check the execution graph after every event")
    p_run.add_argument("--realtime", action="store_true",
                       help="wall clock, threads and real file flushes (no faults)")
    p_run.set_defaults(fn=cmd_run)

    p_ver = sub.add_parser("verify", help="check a trace file for consistency violations")
    p_ver.add_argument("trace", help="trace.txt produced by run")
    p_ver.set_defaults(fn=cmd_verify)

    p_sc = sub.add_parser("scaleout", help="1-node start, rebalance to 4 or 8 nodes")
    p_sc.add_argument("config", help="config with nodes in {4,8}; rebalance_at in us")
    p_sc.add_argument("--out", default=".", help="output directory (default: .)")
    p_sc.set_defaults(fn=cmd_scaleout)

    p_ec = sub.add_parser("ecdf", help="latency eCDF from a metrics.csv")
    p_ec.add_argument("metrics", help="metrics.csv produced by run")
    p_ec.add_argument("--out", default="ecdf.csv", help="output CSV path")
    p_ec.set_defaults(fn=cmd_ecdf)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigInvalid as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
