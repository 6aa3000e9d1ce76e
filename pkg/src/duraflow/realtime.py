"""Wall-clock driver: owner threads over a FileStore, for benchmark runs.

One owner thread per partition plays the role the event scheduler plays in
the simulator: it alone touches its PartitionRuntime. Everyone else (task
workers, peer partitions, the client) communicates by posting closures to
the owner's mailbox, so the runtime never needs internal locking. Activity
functions run on a shared worker pool; log appends (the fsync) run on a
flusher pool with flush_complete posted back, so the owner never blocks on
disk. What distinguishes the speculation modes is result release inside the
runtime, not which thread waits: conservative parks results until the flush
lands regardless of who performed it.

No fault injection here; crash/recovery behavior is the simulator's job.
The state directory is recreated on every run, so stale leases from a
previous run cannot block startup.
"""
from __future__ import annotations

import shutil
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import model
from .config import SimConfig
from .errors import ConfigInvalid
from .framing import event_record
from .graphrec import GraphRecorder
from .messages import Message, partition_of, start_payload
from .metrics import MetricsCollector
from .partition import CLIENT, Envelope
from .runtime import Observer, PartitionRuntime, RuntimeTuning
from .sim import FanoutObserver
from .storage import FileStore, qname, recover_partition_state
from .workloads import req_id, resolve


class _LockedObserver(Observer):
    """Serializes recorder/metrics callbacks arriving from many threads."""

    def __init__(self, inner: Observer, lock: threading.RLock):
        self.inner = inner
        self.lock = lock

    def on_event(self, pid, ev):
        with self.lock:
            self.inner.on_event(pid, ev)

    def on_flush(self, pid, upto):
        with self.lock:
            self.inner.on_flush(pid, upto)

    def on_rewind(self, pid, rewind_to):
        with self.lock:
            self.inner.on_rewind(pid, rewind_to)

    def on_incarnation(self, pid, inc):
        with self.lock:
            self.inner.on_incarnation(pid, inc)

    def on_parked_release(self, pid, req, kind):
        with self.lock:
            self.inner.on_parked_release(pid, req, kind)


class _Owner(threading.Thread):
    def __init__(self, run: "RealtimeRun", pid: int):
        super().__init__(name=f"owner-p{pid}", daemon=True)
        self.run_ctx = run
        self.pid = pid
        self.rt: PartitionRuntime | None = None
        self.mailbox: deque = deque()
        self.cv = threading.Condition()
        self.stop_req = False
        self.done = threading.Event()
        self.failure: BaseException | None = None

    def post(self, fn) -> None:
        self.run_ctx.jobs_up()
        with self.cv:
            self.mailbox.append(fn)
            self.cv.notify()

    def poke(self) -> None:
        with self.cv:
            self.cv.notify()

    def request_stop(self) -> None:
        with self.cv:
            self.stop_req = True
            self.cv.notify()

    def run(self) -> None:
        try:
            self._serve()
        except BaseException as exc:
            self.failure = exc
        finally:
            self.done.set()

    def _serve(self) -> None:
        rn = self.run_ctx
        t = rn.cfg.timing
        rt = PartitionRuntime(self.pid, rn.cfg.partitions, rn.registry, rn.store,
                              rn.tuning, owner="rt0", observer=rn.observer)
        rt.start(rn.now())
        self.rt = rt
        flush_due = rn.now() + t.flush_period(self.pid)
        renew_due = rn.now() + t.lease_renew_us

        while True:
            due = min(flush_due, renew_due)
            with self.cv:
                while not self.mailbox and not self.stop_req and rn.now() < due:
                    self.cv.wait(max((due - rn.now()) / 1e6, 0.0002))
                jobs = list(self.mailbox)
                self.mailbox.clear()
            for fn in jobs:
                fn()
            if jobs:
                rn.jobs_down(len(jobs))

            with rn.qlock:
                tail = rn.queue_envs[self.pid][rt.live.queue_position:]
            if tail:
                rt.ingest_queue(tail)

            while True:
                planned = rt.plan_step()
                if planned is None:
                    break
                plan, inc = planned
                outcome = rt.execute_plan(plan)
                rt.complete_step(plan, outcome, inc)

            while True:
                pt = rt.plan_task()
                if pt is None:
                    break
                spec, inc = pt
                rn.submit_task(self, spec, inc)

            rn.route(rt.drain_sends(rn.now()))

            nw = rn.now()
            if nw >= flush_due:
                flush_due = nw + t.flush_period(self.pid)
                begun = rt.flush_begin()
                if begun is not None:
                    rn.submit_flush(self, begun[1])
            if nw >= renew_due:
                renew_due = nw + t.lease_renew_us
                rt.renew_lease(nw)
            if rt.checkpoint_due(nw):
                rt.write_checkpoint(nw)

            if self.stop_req and not self.mailbox:
                if rt.flush_inflight is not None:
                    with self.cv:  # its completion arrives as a mailbox job
                        while not self.mailbox:
                            self.cv.wait(0.001)
                    continue
                begun = rt.flush_begin()
                if begun is not None:
                    rn.store.log_append(self.pid, begun[1])
                    rt.flush_complete(rn.now())
                    rn.route(rt.drain_sends(rn.now()))
                    continue  # the flush may have released parked work
                if rt.idle():
                    rt.write_checkpoint(rn.now())
                    rt.release_lease()
                    return


class RealtimeRun:
    """Same result surface the simulator exposes, driven by real threads."""

    def __init__(self, cfg: SimConfig, workdir: str):
        if cfg.faults.crash_rate > 0:
            raise ConfigInvalid("real-time mode injects no faults; use the simulator")
        if cfg.scaleout is not None:
            raise ConfigInvalid("scale-out runs are simulator-only")
        workload = resolve(cfg.workload)
        if workload is None:
            raise ConfigInvalid(f"unknown workload {cfg.workload!r}")
        self.cfg = cfg
        self.workload = workload
        self.registry = workload.make_registry()
        self.requests = workload.make_requests(cfg.requests, cfg.seed)
        self.tuning = RuntimeTuning(mode=cfg.mode, lease_ttl_us=cfg.timing.lease_ttl_us,
                                    checkpoint_every_events=cfg.timing.checkpoint_every_events,
                                    checkpoint_every_us=cfg.timing.checkpoint_every_us,
                                    resend_after_us=cfg.timing.resend_after_us)

        shutil.rmtree(workdir, ignore_errors=True)
        Path(workdir).mkdir(parents=True)
        self.store = FileStore(workdir)

        self.obs_lock = threading.RLock()
        self.recorder = GraphRecorder()
        self.metrics = MetricsCollector()
        self.observer = _LockedObserver(FanoutObserver([self.recorder, self.metrics]),
                                        self.obs_lock)

        self.t0 = time.monotonic_ns()
        self.qlock = threading.Lock()
        self.queue_envs: dict[int, list[Envelope]] = {p: [] for p in range(cfg.partitions)}
        self.client_seq: dict[int, int] = {}
        self.client_floor: dict[str, int] = {}
        self.client_msgs = 0
        self.next_submit = 0
        self.reports: dict[str, object] = {}
        self.finished = False
        self.gave_up = False
        self.scaleout_moves: int | None = None

        self.jobs_lock = threading.Lock()
        self.jobs_pending = 0
        self.all_reported = threading.Event()
        self.owners = [_Owner(self, p) for p in range(cfg.partitions)]
        workers = max(1, cfg.workers_per_node * cfg.nodes)
        self.pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="task")
        self.flusher = ThreadPoolExecutor(max_workers=max(2, cfg.partitions // 4),
                                          thread_name_prefix="flush")

    def now(self) -> int:
        return (time.monotonic_ns() - self.t0) // 1000

    # --- cross-thread bookkeeping -------------------------------------------------

    def jobs_up(self, n: int = 1) -> None:
        with self.jobs_lock:
            self.jobs_pending += n

    def jobs_down(self, n: int) -> None:
        with self.jobs_lock:
            self.jobs_pending -= n

    def submit_task(self, owner: _Owner, spec, inc) -> None:
        self.jobs_up()

        def work():
            payload = owner.rt.run_task(spec)  # reads only the registry

            def apply():
                owner.rt.complete_task(spec.task_id, payload, inc)
            owner.post(apply)
            self.jobs_down(1)
        self.pool.submit(work)

    def submit_flush(self, owner: _Owner, data: bytes) -> None:
        self.jobs_up()

        def io():
            self.store.log_append(owner.pid, data)

            def apply():
                rt = owner.rt
                rt.flush_complete(self.now())
                if rt.checkpoint_due(self.now()):
                    rt.write_checkpoint(self.now())
                self.route(rt.drain_sends(self.now()))
            owner.post(apply)
            self.jobs_down(1)
        self.flusher.submit(io)

    # --- message routing ------------------------------------------------------------

    def route(self, sends) -> None:
        for dst, env in sends:
            if dst == CLIENT:
                self._client_recv(env)
            else:
                owner = self.owners[int(dst[1:])]

                def deliver(env=env, owner=owner):
                    owner.rt.ingest_remote([env], self.now())
                owner.post(deliver)

    def _client_recv(self, env: Envelope) -> None:
        if env.seq > self.client_floor.get(env.source, 0):
            self.client_floor[env.source] = env.seq
            rep = env.msg.payload["report"]
            with self.obs_lock:
                first = rep["req"] not in self.reports
                self.reports[rep["req"]] = rep["result"]
                self.metrics.reported(rep["req"], self.now())
                self.recorder.client_delivery(CLIENT, env.msg)
            if first and self.cfg.closed_loops > 0:
                self._submit_next()
            if len(self.reports) == len(self.requests):
                self.all_reported.set()
        src = self.owners[int(env.source[1:])]
        seq = env.seq
        src.post(lambda: src.rt.client_ack(seq))

    # --- client side ------------------------------------------------------------------

    def _submit_next(self) -> None:
        with self.qlock:
            i = self.next_submit
            if i >= len(self.requests):
                return
            self.next_submit += 1
            r = self.requests[i]
            pid = partition_of(r.instance, self.cfg.partitions)
            seq = self.client_seq.get(pid, 0) + 1
            self.client_seq[pid] = seq
            msg = Message(f"c0m{self.client_msgs}", r.instance,
                          start_payload(r.instance.name, r.input, req_id(i)))
            self.client_msgs += 1
            env = Envelope(CLIENT, seq, msg)
            self.store.queue_append(qname(pid), event_record(env.to_obj()))
            self.queue_envs[pid].append(env)
        with self.obs_lock:
            self.metrics.submitted(req_id(i), self.now())
        self.owners[pid].poke()

    # --- run --------------------------------------------------------------------------

    def _quiet(self) -> bool:
        with self.jobs_lock:
            if self.jobs_pending:
                return False
        for o in self.owners:
            rt = o.rt
            if rt is None or not rt.idle() or o.mailbox:
                return False
            with self.qlock:
                if rt.live.queue_position < len(self.queue_envs[o.pid]):
                    return False
        return True

    def run(self) -> "RealtimeRun":
        for o in self.owners:
            o.start()
        deadline = self.cfg.deadline_us
        if not self.requests:
            self.all_reported.set()
        elif self.cfg.closed_loops > 0:
            for _ in range(min(self.cfg.closed_loops, len(self.requests))):
                self._submit_next()
        else:
            gap = self.cfg.arrival_interval_us / 1e6
            for _ in self.requests:
                self._submit_next()
                if gap:
                    time.sleep(gap)

        if not self.all_reported.wait(timeout=max(0.0, deadline - self.now()) / 1e6):
            self.gave_up = True
        else:
            self.finished = True
            # reports are out, but lock releases and confirms still ripple
            while self.now() < deadline and not self._quiet():
                time.sleep(0.005)

        for o in self.owners:
            o.request_stop()
        for o in self.owners:
            o.done.wait(timeout=10)
        self.pool.shutdown(wait=True)
        self.flusher.shutdown(wait=True)
        for o in self.owners:
            if o.failure is not None:
                raise o.failure
        if self.finished:
            with self.obs_lock:
                self.recorder.mark_complete()
        return self

    # --- results ------------------------------------------------------------------------

    def entity_states(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for pid in range(self.cfg.partitions):
            state = recover_partition_state(self.store, pid, self.cfg.partitions).state
            for skey, rec in state.instances.items():
                if rec.kind == "entity":
                    out[skey] = rec.entity_state.user_state
        return out

    def check(self) -> list[str]:
        out = self.workload.check(self.requests, self.reports, self.entity_states())
        if not self.finished:
            out.append(f"incomplete: {len(self.reports)}/{len(self.requests)} "
                       f"requests reported by {self.now()}us")
        out += model.check_consistency(self.recorder.graph).violations
        out += model.check_ccc_properties(self.recorder.graph).violations
        return out


def run_realtime(cfg: SimConfig, workdir: str) -> RealtimeRun:
    return RealtimeRun(cfg, workdir).run()
