"""Deterministic discrete-event simulation of a multi-node cluster.

Time is integer microseconds. Everything runs off one heap of
(time, seq, fn) entries, so identical configs replay identical histories:
the seq counter breaks ties in scheduling order, dict walks are sorted, and
every random draw comes from a named stream `random.Random(f"{seed}:...")`
consumed in event order.

The moving parts per node: partitions it owns (each a real
PartitionRuntime over the shared store), a bounded pool of task workers,
periodic flush and lease-renewal ticks per partition, and a fault coin
flipped after each node action while the fault window is open. A crash
drops all volatile state (the generation counter invalidates every
scheduled callback) and schedules a restart that re-acquires leases and
recovers from checkpoint + log. Deliveries to a dead or disowned partition
are dropped; outbox resend timers heal the loss.

Scale-out reassigns partitions with minimal moves and gracefully hands each
one over: final flush, checkpoint, lease release, then the new owner boots.
The unflushed remainder is abandoned exactly as a crash would abandon it,
which is safe for the same reason: nothing unflushed has escaped except
tagged speculative sends, and those are covered by the recovery broadcast
the new owner issues when it starts.
"""
from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field

from . import cluster, model
from .config import SimConfig
from .errors import ConfigInvalid, LeaseHeld
from .framing import event_record
from .graphrec import GraphRecorder
from .messages import Message, partition_of, start_payload
from .metrics import MetricsCollector
from .partition import CLIENT, Envelope
from .runtime import Observer, PartitionRuntime, RuntimeTuning
from .storage import MemStore, qname, recover_partition_state
from .workloads import req_id, resolve


class FanoutObserver(Observer):
    def __init__(self, children):
        self.children = list(children)

    def on_event(self, pid, ev):
        for c in self.children:
            c.on_event(pid, ev)

    def on_flush(self, pid, upto):
        for c in self.children:
            c.on_flush(pid, upto)

    def on_rewind(self, pid, rewind_to):
        for c in self.children:
            c.on_rewind(pid, rewind_to)

    def on_incarnation(self, pid, inc):
        for c in self.children:
            c.on_incarnation(pid, inc)

    def on_parked_release(self, pid, req, kind):
        for c in self.children:
            c.on_parked_release(pid, req, kind)


@dataclass
class Node:
    name: str
    alive: bool = True
    generation: int = 0   # bumped on crash; stale callbacks see it and stop
    runtimes: dict[int, PartitionRuntime] = field(default_factory=dict)
    busy_workers: int = 0


class Simulation:
    def __init__(self, cfg: SimConfig, paranoid: bool = False):
        workload = resolve(cfg.workload)
        if workload is None:
            raise ConfigInvalid(f"unknown workload {cfg.workload!r}")
        self.cfg = cfg
        self.workload = workload
        self.registry = self.workload.make_registry()
        self.requests = self.workload.make_requests(cfg.requests, cfg.seed)

        self.store = MemStore()
        self.now = 0
        self.heap: list = []
        self._seq = itertools.count()
        self.rng_tasks = random.Random(f"{cfg.seed}:tasks")
        self.rng_faults = random.Random(f"{cfg.seed}:faults")

        self.recorder = GraphRecorder(paranoid=paranoid)
        self.metrics = MetricsCollector()
        self.observer = FanoutObserver([self.recorder, self.metrics])

        names = [f"n{i}" for i in range(cfg.nodes)]
        self.nodes: dict[str, Node] = {n: Node(n) for n in names}
        self.assignment = cluster.assign(cfg.partitions, names)
        self.scaleout_moves: int | None = None

        self.step_busy: set[int] = set()
        self.client_floor: dict[str, int] = {}
        self.client_seq: dict[int, int] = {}
        self.client_msgs = 0
        # mirror of each durable queue, so ingestion does not re-parse bytes
        self.queue_envs: dict[int, list[Envelope]] = {p: [] for p in range(cfg.partitions)}
        self.reports: dict[str, object] = {}
        self.next_submit = 0
        self.finished = False
        self.gave_up = False
        # (node name, pid, generation) with a pending periodic tick; lets the
        # run wind the tickers down once all reports are out and the engine
        # has drained, so the heap can empty
        self.flush_armed: set[tuple[str, int, int]] = set()
        self.renew_armed: set[tuple[str, int, int]] = set()

    # --- scheduling ---------------------------------------------------------

    def at(self, delay_us: int, fn) -> None:
        heapq.heappush(self.heap, (self.now + delay_us, next(self._seq), fn))

    def _valid(self, node: Node, pid: int, gen: int) -> bool:
        return (node.alive and node.generation == gen and pid in node.runtimes
                and self.assignment.get(pid) == node.name)

    def _owner(self, pid: int) -> tuple[Node, PartitionRuntime] | None:
        name = self.assignment.get(pid)
        node = self.nodes.get(name)
        if node is None or not node.alive:
            return None
        rt = node.runtimes.get(pid)
        if rt is None:
            return None
        return node, rt

    # --- run ----------------------------------------------------------------

    def run(self) -> "Simulation":
        for node in self.nodes.values():
            for pid in sorted(p for p, n in self.assignment.items() if n == node.name):
                self._boot(node, pid)
        if self.cfg.closed_loops > 0:
            for _ in range(min(self.cfg.closed_loops, len(self.requests))):
                self._submit_next()
        else:
            for i, r in enumerate(self.requests):
                self.at(i * self.cfg.arrival_interval_us, self._submitter(i, r))
        if self.cfg.scaleout is not None:
            self.at(self.cfg.scaleout.at_us, self._scaleout)
        for at_us, name in self.cfg.faults.crashes_at:
            def scripted(name=name):
                node = self.nodes.get(name)
                if node is not None and node.alive:
                    self._crash(node)
            self.at(at_us, scripted)
        if not self.requests:
            self.finished = True

        while self.heap:
            when, _, fn = heapq.heappop(self.heap)
            if when > self.cfg.deadline_us:
                self.gave_up = True
                break
            self.now = when
            fn()
        if self.finished:
            self.recorder.mark_complete()
        return self

    # --- client side ----------------------------------------------------------

    def _submit_next(self) -> None:
        i = self.next_submit
        if i >= len(self.requests):
            return
        self.next_submit += 1
        self._submitter(i, self.requests[i])()

    def _submitter(self, i: int, r):
        def submit():
            pid = partition_of(r.instance, self.cfg.partitions)
            seq = self.client_seq.get(pid, 0) + 1
            self.client_seq[pid] = seq
            msg = Message(f"c0m{self.client_msgs}", r.instance,
                          start_payload(r.instance.name, r.input, req_id(i)))
            self.client_msgs += 1
            env = Envelope(CLIENT, seq, msg)
            self.store.queue_append(qname(pid), event_record(env.to_obj()))
            self.queue_envs[pid].append(env)
            self.metrics.submitted(req_id(i), self.now)
            self.at(self.cfg.timing.hop_us, lambda: self._poke(pid))
        return submit

    def _poke(self, pid: int) -> None:
        owned = self._owner(pid)
        if owned is not None:
            self._drive(*owned)

    def _client_recv(self, env: Envelope):
        def recv():
            if env.seq > self.client_floor.get(env.source, 0):
                self.client_floor[env.source] = env.seq
                rep = env.msg.payload["report"]
                self.reports[rep["req"]] = rep["result"]
                self.metrics.reported(rep["req"], self.now)
                self.recorder.client_delivery(CLIENT, env.msg)
                if self.cfg.closed_loops > 0:
                    self._submit_next()
                if len(self.reports) == len(self.requests):
                    self.finished = True
            # always ack, duplicates included: a resend means the ack was lost
            src_pid = int(env.source[1:])

            def ack():
                owned = self._owner(src_pid)
                if owned is not None:
                    owned[1].client_ack(env.seq)
            self.at(self.cfg.timing.hop_us, ack)
        return recv

    # --- network ---------------------------------------------------------------

    def _post(self, sends) -> None:
        for dst, env in sends:
            if dst == CLIENT:
                self.at(self.cfg.timing.hop_us, self._client_recv(env))
            else:
                self.at(self.cfg.timing.hop_us, self._deliverer(int(dst[1:]), env))

    def _deliverer(self, dpid: int, env: Envelope):
        def deliver():
            owned = self._owner(dpid)
            if owned is None:
                return  # receiver down or disowned; sender's resend heals this
            node, rt = owned
            rt.ingest_remote([env], self.now)
            self._drive(node, dpid)
        return deliver

    # --- node/partition lifecycle ------------------------------------------------

    def _tuning(self) -> RuntimeTuning:
        t = self.cfg.timing
        return RuntimeTuning(mode=self.cfg.mode, lease_ttl_us=t.lease_ttl_us,
                             checkpoint_every_events=t.checkpoint_every_events,
                             checkpoint_every_us=t.checkpoint_every_us,
                             resend_after_us=t.resend_after_us)

    def _boot(self, node: Node, pid: int, attempt: int = 0) -> None:
        gen = node.generation
        rt = PartitionRuntime(pid, self.cfg.partitions, self.registry, self.store,
                              self._tuning(), owner=node.name, observer=self.observer)
        try:
            rt.start(self.now)
        except LeaseHeld:
            # previous owner died without releasing; retry until the ttl runs out
            if attempt < 100:
                self.at(self.cfg.timing.lease_ttl_us // 8,
                        lambda: self._valid_boot(node, pid, gen, attempt + 1))
            return
        node.runtimes[pid] = rt
        self._post(rt.drain_sends(self.now))
        self._drive(node, pid)
        self._wake(node, pid)

    def _valid_boot(self, node: Node, pid: int, gen: int, attempt: int) -> None:
        if (node.alive and node.generation == gen and pid not in node.runtimes
                and self.assignment.get(pid) == node.name):
            self._boot(node, pid, attempt)

    def _quiet(self, node: Node, pid: int) -> bool:
        """Nothing left for the periodic ticks to push along."""
        rt = node.runtimes.get(pid)
        if rt is None:
            return True
        return (rt.idle() and pid not in self.step_busy
                and rt.live.queue_position >= len(self.queue_envs[pid]))

    def _wake(self, node: Node, pid: int) -> None:
        """Arm the periodic ticks unless the run is over and the partition
        has drained. Idempotent; every work arrival routes through here, so
        a partition woken after winding down starts ticking again."""
        if self.finished and self._quiet(node, pid):
            return
        gen = node.generation
        key = (node.name, pid, gen)
        if key not in self.flush_armed:
            self.flush_armed.add(key)
            self.at(self.cfg.timing.flush_period(pid), self._flush_tick(node, pid, gen))
        if key not in self.renew_armed:
            self.renew_armed.add(key)
            self.at(self.cfg.timing.lease_renew_us, self._renew_tick(node, pid, gen))

    def _flush_tick(self, node: Node, pid: int, gen: int):
        def tick():
            self.flush_armed.discard((node.name, pid, gen))
            if not self._valid(node, pid, gen):
                return
            rt = node.runtimes[pid]
            begun = rt.flush_begin()
            if begun is not None:
                _upto, data = begun
                self.store.log_append(pid, data)
                rt.flush_complete(self.now)
                if rt.checkpoint_due(self.now):
                    rt.write_checkpoint(self.now)
            self._post(rt.drain_sends(self.now))
            self._drive(node, pid)
            if self._fault(node):
                return
            self._wake(node, pid)
        return tick

    def _renew_tick(self, node: Node, pid: int, gen: int):
        def tick():
            self.renew_armed.discard((node.name, pid, gen))
            if not self._valid(node, pid, gen):
                return
            node.runtimes[pid].renew_lease(self.now)
            self._wake(node, pid)
        return tick

    def _drive(self, node: Node, pid: int) -> None:
        rt = node.runtimes.get(pid)
        if rt is None or not node.alive:
            return
        rt.ingest_queue(self.queue_envs[pid][rt.live.queue_position:])

        if pid not in self.step_busy:
            planned = rt.plan_step()
            if planned is not None:
                plan, inc = planned
                outcome = rt.execute_plan(plan)
                self.step_busy.add(pid)
                gen = node.generation

                def step_done():
                    self.step_busy.discard(pid)
                    if not self._valid(node, pid, gen):
                        return
                    rt.complete_step(plan, outcome, inc)
                    if self._fault(node):
                        return
                    self._drive(node, pid)
                self.at(self.cfg.timing.step_us, step_done)

        self._pull_tasks(node)
        self._post(rt.drain_sends(self.now))
        self._wake(node, pid)

    def _pull_tasks(self, node: Node) -> None:
        t = self.cfg.timing
        while node.alive and node.busy_workers < self.cfg.workers_per_node:
            picked = None
            for pid in sorted(node.runtimes):
                planned = node.runtimes[pid].plan_task()
                if planned is not None:
                    picked = (pid, planned[0], planned[1])
                    break
            if picked is None:
                return
            pid, spec, inc = picked
            node.busy_workers += 1
            gen = node.generation
            duration = self.rng_tasks.randint(t.task_min_us, t.task_max_us)

            def task_done(pid=pid, spec=spec, inc=inc, gen=gen):
                if node.generation != gen:
                    return  # the crash already reset the worker pool
                node.busy_workers -= 1
                rt = node.runtimes.get(pid)
                if rt is not None and self.assignment.get(pid) == node.name:
                    rt.complete_task(spec.task_id, rt.run_task(spec), inc)
                    if self._fault(node):
                        return
                    self._drive(node, pid)
                self._pull_tasks(node)
            self.at(duration, task_done)

    # --- faults -------------------------------------------------------------------

    def _fault(self, node: Node) -> bool:
        f = self.cfg.faults
        if (f.crash_rate <= 0 or not node.alive
                or self.now >= f.crash_until_frac * self.cfg.horizon_us):
            return False
        if self.rng_faults.random() >= f.crash_rate:
            return False
        self._crash(node)
        return True

    def _crash(self, node: Node) -> None:
        self.metrics.crashed()
        node.generation += 1
        node.alive = False
        node.busy_workers = 0
        gen = node.generation
        for pid in sorted(node.runtimes):
            self.recorder.abort_above(pid, node.runtimes[pid].flushed)
            self.step_busy.discard(pid)
        node.runtimes = {}

        def restart():
            if node.generation != gen:
                return
            node.alive = True
            for pid in sorted(p for p, n in self.assignment.items() if n == node.name):
                self._boot(node, pid)
        self.at(self.cfg.timing.restart_us, restart)

    # --- scale-out -------------------------------------------------------------------

    def _scaleout(self) -> None:
        names = [f"n{i}" for i in range(self.cfg.scaleout.nodes_after)]
        for name in names:
            if name not in self.nodes:
                self.nodes[name] = Node(name)
        old = dict(self.assignment)
        self.assignment = cluster.rebalance(old, names)
        moved = cluster.moves(old, self.assignment)
        self.scaleout_moves = len(moved)
        for pid in moved:
            src = self.nodes.get(old.get(pid))
            dst = self.nodes[self.assignment[pid]]
            self._handover(src, pid, dst)

    def _handover(self, src: Node | None, pid: int, dst: Node) -> None:
        if src is not None and src.alive and pid in src.runtimes:
            rt = src.runtimes.pop(pid)
            self.step_busy.discard(pid)
            begun = rt.flush_begin()
            if begun is not None:
                _upto, data = begun
                self.store.log_append(pid, data)
                rt.flush_complete(self.now)
            rt.write_checkpoint(self.now)
            self._post(rt.drain_sends(self.now))
            # anything past the final flush is abandoned, same as a crash
            self.recorder.abort_above(pid, rt.flushed)
            rt.release_lease()
        self._boot(dst, pid)

    # --- results --------------------------------------------------------------------

    def entity_states(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for pid in range(self.cfg.partitions):
            owned = self._owner(pid)
            if owned is not None:
                state = owned[1].live
            else:
                state = recover_partition_state(self.store, pid, self.cfg.partitions).state
            for skey, rec in state.instances.items():
                if rec.kind == "entity":
                    out[skey] = rec.entity_state.user_state
        return out

    def check(self) -> list[str]:
        """Workload invariants plus the commit bullets over the final graph."""
        out = self.workload.check(self.requests, self.reports, self.entity_states())
        if not self.finished:
            out.append(f"incomplete: {len(self.reports)}/{len(self.requests)} "
                       f"requests reported by {self.now}us")
        out += model.check_consistency(self.recorder.graph).violations
        out += model.check_ccc_properties(self.recorder.graph).violations
        return out


def simulate(cfg: SimConfig, paranoid: bool = False) -> Simulation:
    return Simulation(cfg, paranoid=paranoid).run()
