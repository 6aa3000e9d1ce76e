"""Synchronous cluster driver shared by the protocol and graph test suites.

ManualCluster runs real PartitionRuntimes over a MemStore with no simulated
time beyond a counter: every step and task executes instantly and the test
controls exactly when each partition flushes or crashes. It is the smallest
harness that can run the full protocol across partitions.

The client side behaves like a partition in the one way that matters: it
dedups report envelopes by per-source sequence number, because a sender that
crashed after flushing its outbox will resend on restart.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from duraflow.framing import event_record
from duraflow.messages import InstanceId, partition_of, Message, start_payload
from duraflow.partition import CLIENT, Envelope, pname
from duraflow.runtime import PartitionRuntime, RuntimeTuning
from duraflow.storage import MemStore, parse_queue, qname
from duraflow.workflow import WorkflowDefinition

from tests.test_partition import find_key
from tests.test_workflow import locker_registry


@dataclass
class ManualCluster:
    registry: object
    partitions: int = 3
    mode: str = "conservative"
    observer: object = None
    store: MemStore = field(default_factory=MemStore)
    now: int = 0
    runtimes: dict = field(default_factory=dict)
    client_seq: dict = field(default_factory=dict)
    client_msgs: int = 0
    client_floor: dict = field(default_factory=dict)  # per-source report dedup
    reports: list = field(default_factory=list)
    no_flush: set = field(default_factory=set)
    network: list = field(default_factory=list)   # (dst_key, Envelope), in-order

    def __post_init__(self):
        for pid in range(self.partitions):
            self.boot(pid)

    def tuning(self) -> RuntimeTuning:
        return RuntimeTuning(mode=self.mode, resend_after_us=50_000)

    def boot(self, pid: int) -> None:
        rt = PartitionRuntime(pid, self.partitions, self.registry, self.store,
                              self.tuning(), owner=f"node{pid}", observer=self.observer)
        rt.start(self.now)
        self.runtimes[pid] = rt
        self.route(rt.drain_sends(self.now))

    def crash(self, pid: int) -> None:
        abort_above = getattr(self.observer, "abort_above", None)
        if abort_above is not None:
            abort_above(pid, self.runtimes[pid].flushed)
        del self.runtimes[pid]
        # in-flight deliveries to a dead partition are lost with its memory
        self.network = [(dst, env) for dst, env in self.network if dst != pname(pid)]

    def submit(self, instance: InstanceId, input, req: str | None = None) -> None:
        pid = partition_of(instance, self.partitions)
        seq = self.client_seq.get(pid, 0) + 1
        self.client_seq[pid] = seq
        msg = Message(f"c0m{self.client_msgs}", instance,
                      start_payload(instance.name, input, req))
        self.client_msgs += 1
        env = Envelope(CLIENT, seq, msg)
        self.store.queue_append(qname(pid), event_record(env.to_obj()))

    def route(self, sends) -> None:
        for dst, env in sends:
            if dst == CLIENT:
                rt = self.runtimes[int(env.source[1:])]
                rt.client_ack(env.seq)
                if env.seq > self.client_floor.get(env.source, 0):
                    self.client_floor[env.source] = env.seq
                    self.reports.append(env.msg.payload["report"])
                    delivered = getattr(self.observer, "client_delivery", None)
                    if delivered is not None:
                        delivered(CLIENT, env.msg)
            else:
                self.network.append((dst, env))

    def deliver_all(self) -> bool:
        moved = bool(self.network)
        batch, self.network = self.network, []
        for dst, env in batch:
            pid = int(dst[1:])
            rt = self.runtimes.get(pid)
            if rt is None:
                continue  # receiver is down; sender's outbox will retry
            rt.ingest_remote([env], self.now)
        return moved

    def pump(self, rounds: int = 200) -> None:
        for _ in range(rounds):
            self.now += 1000
            progressed = False
            for pid in sorted(self.runtimes):
                rt = self.runtimes[pid]
                envs = parse_queue(self.store.queue_read(qname(pid)))
                if rt.ingest_queue(envs[rt.live.queue_position:]):
                    progressed = True
                while True:
                    planned = rt.plan_step()
                    if planned is None:
                        break
                    plan, inc = planned
                    outcome = rt.execute_plan(plan)
                    rt.complete_step(plan, outcome, inc)
                    progressed = True
                while True:
                    planned = rt.plan_task()
                    if planned is None:
                        break
                    spec, inc = planned
                    rt.complete_task(spec.task_id, rt.run_task(spec), inc)
                    progressed = True
                if pid not in self.no_flush:
                    begun = rt.flush_begin()
                    if begun is not None:
                        upto, data = begun
                        self.store.log_append(pid, data)
                        rt.flush_complete(self.now)
                        progressed = True
                sends = rt.drain_sends(self.now)
                if sends:
                    progressed = True
                self.route(sends)
            if self.deliver_all():
                progressed = True
            if not progressed:
                return
        raise AssertionError("cluster did not quiesce")

    def instance_record(self, instance: InstanceId):
        pid = partition_of(instance, self.partitions)
        return self.runtimes[pid].live.instances.get(instance.skey)


def spread_locker_instances(partitions=3):
    """A Locker workflow instance and two Counter entities on three partitions."""
    reg = locker_registry()

    lk = find_key("LockerX", partitions, 0)
    a_key = find_key("Counter", partitions, 1)
    b_key = find_key("Counter", partitions, 2, avoid={a_key})
    a = InstanceId("Counter", a_key)
    b = InstanceId("Counter", b_key)

    def locker(ctx):
        token = yield ctx.lock([b, a])
        ra = yield ctx.call_entity(a, "add", 1)
        rb = yield ctx.call_entity(b, "add", 1)
        ctx.release(token)
        return [ra, rb]

    reg.add_workflow(WorkflowDefinition("LockerX", locker))
    return reg, InstanceId("LockerX", lk), a, b
