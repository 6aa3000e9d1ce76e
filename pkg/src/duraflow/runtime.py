"""The partition owner: one object per owned partition, no IO of its own.

PartitionRuntime composes the pure fold (partition), the durable host
(storage), and the speculation bookkeeping into a sans-IO state machine.
A driver (the discrete-event simulator or the threaded real-time host)
decides *when* things happen and calls in:

    ingest_queue / ingest_remote     arrivals
    plan_step / execute_plan / complete_step
    plan_task / run_task / complete_task
    flush_begin / flush_complete     durability, in two phases
    drain_sends                      outgoing envelopes, data and control
    write_checkpoint, renew_lease, rewind handling via notices

Two states are kept: `live` includes every appended event, `durable` only
the flushed prefix. A rewind reverts `live` to durable-plus-retained-
pending; nothing durable is ever unwritten. The speculation barrier caps
what flush_begin may cover, so the durable log never contains a record
that depends on an unconfirmed speculative message: flushed and persisted
are the same thing here.

In-flight work is fenced by incarnation: a step or task completion from
before a rewind (or from a previous lease epoch) is discarded on arrival,
and the re-executed partition re-derives identical identities for whatever
it reproduces.

Execution modes:
    conservative  act only on durable records; nothing speculative anywhere
    local         run steps and tasks on unflushed records; sends still wait
    global        additionally send unflushed cross-partition messages, tagged
Completion reports to the client always wait for durability, in all modes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ConfigInvalid, PartitionError
from .framing import epoch_record, event_record
from .messages import Incarnation, InstanceId, Message, TaskSpec, task_result_payload
from .partition import (CLIENT, Envelope, PartitionState, StepPlan, apply_event, event_to_obj,
                        make_recv_event, make_sent_event, make_step_event, make_task_event,
                        next_step_plan, pname, ready_tasks)
from .speculation import SpeculationManager, ack_payload, control_kind
from .storage import recover_partition_state
from .util import jsoncopy
from .workflow import (StepOutcome, WorkflowRegistry, execute_entity_step,
                       execute_orchestration_step, fresh_entity_state)

MODES = ("conservative", "local", "global")


@dataclass
class RuntimeTuning:
    mode: str = "conservative"
    lease_ttl_us: int = 10_000_000
    checkpoint_every_events: int = 256
    checkpoint_every_us: int = 10_000_000
    resend_after_us: int = 500_000
    max_queue_batch: int = 64
    max_history: int = 100_000

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigInvalid(f"unknown mode {self.mode!r}; pick one of {MODES}")

    @property
    def conservative(self) -> bool:
        return self.mode == "conservative"

    @property
    def speculate_remote(self) -> bool:
        return self.mode == "global"


class Observer:
    """Override what you care about; the runtime calls these synchronously."""

    def on_event(self, pid: int, ev: Any) -> None:
        pass

    def on_flush(self, pid: int, upto: int) -> None:
        pass

    def on_rewind(self, pid: int, rewind_to: int) -> None:
        pass

    def on_incarnation(self, pid: int, inc: Incarnation) -> None:
        # fired at start and after every rewind; message ids are re-minted
        # from rewound counters, so only (incarnation, id) names a message
        pass

    def on_parked_release(self, pid: int, req: str | None, kind: str) -> None:
        pass


def _ctl_msg(payload: dict) -> Message:
    return Message(id="ctl", target=InstanceId("_ctl", CLIENT), payload=payload)


class PartitionRuntime:
    def __init__(self, pid: int, partitions: int, registry: WorkflowRegistry, store,
                 tuning: RuntimeTuning, owner: str, observer: Observer | None = None) -> None:
        self.pid = pid
        self.partitions = partitions
        self.registry = registry
        self.store = store
        self.tuning = tuning
        self.owner = owner
        self.observer = observer or Observer()

        self.live: PartitionState | None = None
        self.durable: PartitionState | None = None
        self.pending: list = []
        self.flushed = -1
        self.flush_inflight: tuple[int, bytes] | None = None
        self.epoch = 0
        self.spec: SpeculationManager | None = None

        self.busy_instances: set[str] = set()
        self.busy_tasks: set[str] = set()
        self.acked: dict[str, int] = {}
        self.last_ack_sent: dict[str, int] = {}
        self.last_send_us: dict[int, int] = {}
        self.ctl_out: list[tuple[str, dict]] = []  # (target_key or "*", payload)
        self.last_checkpoint_pos = 0
        self.last_checkpoint_us = 0
        self.stopping = False

    # --- lifecycle -------------------------------------------------------------

    def start(self, now_us: int) -> None:
        self.epoch = self.store.lease_acquire(self.pid, self.owner, now_us,
                                              self.tuning.lease_ttl_us)
        self.store.log_append(self.pid, epoch_record(self.epoch))
        rec = recover_partition_state(self.store, self.pid, self.partitions)
        self.durable = rec.state
        self.live = rec.state.clone()
        self.pending = []
        self.flushed = self.durable.log_len - 1
        self.spec = SpeculationManager(pname(self.pid), (self.epoch, 0))
        self.observer.on_incarnation(self.pid, self.spec.incarnation)
        positions = self.store.checkpoint_positions(self.pid)
        self.last_checkpoint_pos = positions[-1] if positions else 0
        self.last_checkpoint_us = now_us
        if self.tuning.speculate_remote:
            self.ctl_out.append(("*", self.spec.restart_notice(self.flushed)))

    def renew_lease(self, now_us: int) -> None:
        self.store.lease_renew(self.pid, self.owner, self.epoch, now_us,
                               self.tuning.lease_ttl_us)

    def release_lease(self) -> None:
        self.store.lease_release(self.pid, self.owner, self.epoch)

    @property
    def incarnation(self) -> Incarnation:
        return self.spec.incarnation

    def idle(self) -> bool:
        return (not self.busy_instances and not self.busy_tasks
                and not self.pending and self.flush_inflight is None
                and not self.ctl_out and not self.live.outbox)

    # --- event append ------------------------------------------------------------

    def _append(self, ev) -> None:
        apply_event(self.live, ev)
        self.pending.append(ev)
        self.observer.on_event(self.pid, ev)

    # --- arrivals ----------------------------------------------------------------

    def ingest_queue(self, envelopes: list[Envelope]) -> bool:
        batch = envelopes[:self.tuning.max_queue_batch]
        if not batch:
            return False
        ev = make_recv_event(self.live, batch,
                             new_queue_position=self.live.queue_position + len(batch))
        if ev is None:
            return False
        self._append(ev)
        return True

    def ingest_remote(self, envelopes: list[Envelope], now_us: int) -> bool:
        changed = False
        data: list[Envelope] = []
        batch_max_seq: dict[str, int] = {}
        for env in envelopes:
            kind = control_kind(env.msg)
            if kind is not None:
                self._handle_control(kind, env.msg.payload[kind])
                changed = True
                continue
            if env.floor is not None:
                inc, pos = env.floor
                self.spec.apply_floor(env.source, (inc[0], inc[1]), pos)
            batch_max_seq[env.source] = max(batch_max_seq.get(env.source, 0), env.seq)
            data.append(env)
        if data:
            ev = make_recv_event(self.live, data, drop_tag=lambda m: self.spec.is_stale(m.tag))
            if ev is not None:
                for msg in ev.admitted:
                    if msg.tag is not None and self.spec.needs_anchor(msg.tag):
                        self.spec.register_anchor(msg.tag, ev.pos)
                self._append(ev)
                changed = True
        # a batch that is entirely below our durable floor means the sender
        # missed our ack; repeat it so their outbox can retire the entry
        for source, max_seq in sorted(batch_max_seq.items()):
            durable_floor = self.durable.dedup.get(source, 0)
            if max_seq <= durable_floor and source.startswith("p"):
                self.ctl_out.append((source, ack_payload(pname(self.pid), durable_floor)))
        return changed

    def _handle_control(self, kind: str, body: dict) -> None:
        if kind == "confirm":
            self.spec.apply_floor(body["src"], (body["inc"][0], body["inc"][1]),
                                  body["flushed"])
        elif kind == "recovery":
            rewind_to = self.spec.on_recovery_notice(
                body["src"], (body["inc"][0], body["inc"][1]), body["recovered"])
            if rewind_to is not None:
                self.rewind(rewind_to)
        elif kind == "ack":
            src = body["src"]
            self.acked[src] = max(self.acked.get(src, 0), body["seq"])

    # --- steps ----------------------------------------------------------------------

    def plan_step(self) -> tuple[StepPlan, Incarnation] | None:
        if self.stopping:
            return None
        plan = next_step_plan(self.live, self.tuning.conservative, self.flushed,
                              self.busy_instances)
        if plan is None:
            return None
        self.busy_instances.add(plan.skey)
        return plan, self.spec.incarnation

    def execute_plan(self, plan: StepPlan) -> StepOutcome:
        """Pure: reads the instance record, runs user code, touches nothing."""
        name = plan.instance.name
        rec = self.live.instances.get(plan.skey)
        payloads = [jsoncopy(m.payload) for m in plan.msgs]
        if name in self.registry.entities:
            defn = self.registry.entities[name]
            es = rec.entity_state if rec is not None and rec.entity_state is not None \
                else fresh_entity_state(defn)
            new_es, outputs = execute_entity_step(defn, es, payloads)
            return StepOutcome(kind="entity", status="running", entity_state=new_es,
                               produced_messages=outputs)
        if name in self.registry.workflows:
            defn = self.registry.workflows[name]
            history = rec.history if rec is not None else []
            return execute_orchestration_step(defn, plan.instance, history, payloads,
                                              self.tuning.max_history)
        raise ConfigInvalid(f"no workflow or entity registered under {name!r}")

    def complete_step(self, plan: StepPlan, outcome: StepOutcome,
                      inc: Incarnation) -> bool:
        self.busy_instances.discard(plan.skey)
        if inc != self.spec.incarnation:
            return False  # executed against a rolled-back or pre-crash state
        self._append(make_step_event(self.live, plan, outcome))
        return True

    # --- tasks -----------------------------------------------------------------------

    def plan_task(self) -> tuple[TaskSpec, Incarnation] | None:
        if self.stopping:
            return None
        specs = ready_tasks(self.live, self.tuning.conservative, self.flushed,
                            self.busy_tasks)
        if not specs:
            return None
        spec = specs[0]
        self.busy_tasks.add(spec.task_id)
        return spec, self.spec.incarnation

    def run_task(self, spec: TaskSpec) -> dict:
        fn = self.registry.activities.get(spec.task_name)
        if fn is None:
            return task_result_payload(spec.schedule_id,
                                       f"no activity named {spec.task_name!r}", failed=True)
        try:
            return task_result_payload(spec.schedule_id, fn(jsoncopy(spec.input)))
        except Exception as exc:
            return task_result_payload(spec.schedule_id, f"{type(exc).__name__}: {exc}",
                                       failed=True)

    def complete_task(self, task_id: str, payload: dict, inc: Incarnation) -> bool:
        self.busy_tasks.discard(task_id)
        if inc != self.spec.incarnation:
            return False
        spec = self.live.tasks.get(task_id)
        if spec is None:
            return False  # retired concurrently; the fold would reject it anyway
        self._append(make_task_event(self.live, spec, payload))
        return True

    # --- durability ---------------------------------------------------------------------

    def flush_begin(self) -> tuple[int, bytes] | None:
        if self.flush_inflight is not None or not self.pending:
            return None
        tip = self.live.log_len - 1
        upto = self.spec.barrier(tip)
        if upto <= self.flushed:
            return None  # everything flushable already is, or the barrier holds
        data = b"".join(event_record(event_to_obj(ev)) for ev in self.pending
                        if ev.pos <= upto)
        self.flush_inflight = (upto, data)
        return upto, data

    def flush_complete(self, now_us: int) -> int:
        if self.flush_inflight is None:
            raise PartitionError("no flush in flight")
        upto, _ = self.flush_inflight
        self.flush_inflight = None
        old = self.flushed
        for ev in self.pending:
            if ev.pos <= upto:
                apply_event(self.durable, ev)
        self.pending = [ev for ev in self.pending if ev.pos > upto]
        self.flushed = upto
        self.observer.on_flush(self.pid, upto)

        self.ctl_out.extend(self.spec.confirms_due(upto))
        for source in sorted(self.durable.dedup):
            if not source.startswith("p"):
                continue
            floor = self.durable.dedup[source]
            if floor > self.last_ack_sent.get(source, 0):
                self.last_ack_sent[source] = floor
                self.ctl_out.append((source, ack_payload(pname(self.pid), floor)))
        self._note_released(old, upto)
        return upto

    def _req_of(self, skey: str, msg: Message | None = None) -> str | None:
        rec = self.live.instances.get(skey)
        if rec is not None and rec.req:
            return rec.req
        if msg is not None and isinstance(msg.payload, dict):
            body = msg.payload.get("start")
            if body and body.get("req"):
                return body["req"]
        return None

    def _note_released(self, old: int, new: int) -> None:
        """Work that was parked on durability and is now free to go."""
        for skey, entries in self.live.sessions.items():
            if skey in self.busy_instances or not entries:
                continue
            head = entries[0].msg
            if self.tuning.conservative and old < head.ready_at <= new:
                self.observer.on_parked_release(self.pid, self._req_of(skey, head), "message")
        for tid, spec in self.live.tasks.items():
            if tid in self.busy_tasks:
                continue
            if self.tuning.conservative and old < spec.origin_logpos <= new:
                self.observer.on_parked_release(self.pid, self._req_of(spec.respond_to.skey),
                                                "task")
        for entry in self.live.outbox:
            if old < entry.origin_logpos <= new:
                for send in entry.sends:
                    if send.target_key == CLIENT:
                        req = send.msg.payload.get("report", {}).get("req")
                        self.observer.on_parked_release(self.pid, req, "report")

    def checkpoint_due(self, now_us: int) -> bool:
        covered = self.durable.log_len
        if covered <= self.last_checkpoint_pos:
            return False
        if covered - self.last_checkpoint_pos >= self.tuning.checkpoint_every_events:
            return True
        return now_us - self.last_checkpoint_us >= self.tuning.checkpoint_every_us

    def write_checkpoint(self, now_us: int) -> int:
        pos = self.durable.log_len
        self.store.checkpoint_write(self.pid, pos, self.durable.encode())
        self.store.checkpoint_prune(self.pid, keep=2)
        self.last_checkpoint_pos = pos
        self.last_checkpoint_us = now_us
        return pos

    # --- sending --------------------------------------------------------------------------

    def drain_sends(self, now_us: int) -> list[tuple[str, Envelope]]:
        out: list[tuple[str, Envelope]] = []
        me = pname(self.pid)

        for target_key, payload in self.ctl_out:
            env = Envelope(me, 0, _ctl_msg(payload))
            if target_key == "*":
                for p in range(self.partitions):
                    if p != self.pid:
                        out.append((pname(p), env))
            else:
                out.append((target_key, env))
        self.ctl_out = []

        retire: list[int] = []
        floor = (list(self.spec.incarnation), self.flushed)
        for entry in self.live.outbox:
            if all(s.seq <= self.acked.get(s.target_key, 0) for s in entry.sends):
                retire.append(entry.origin_logpos)
                continue
            origin = entry.origin_logpos
            durable_entry = origin <= self.flushed
            for send in entry.sends:
                if send.seq <= self.acked.get(send.target_key, 0):
                    continue
                if not durable_entry:
                    # reports wait for durability everywhere; peers only until
                    # the globally speculating mode lets tagged sends through
                    if send.target_key == CLIENT or not self.tuning.speculate_remote:
                        continue
                key = (origin, send.target_key, send.seq)
                last = self.last_send_us.get(key)
                if last is not None and now_us - last < self.tuning.resend_after_us:
                    continue
                self.last_send_us[key] = now_us
                msg = Message.from_obj(send.msg.to_obj())
                if not durable_entry:
                    msg.tag = self.spec.tag_for(origin)
                    if last is None:
                        self.spec.note_tagged_send(send.target_key, origin)
                out.append((send.target_key, Envelope(me, send.seq, msg, floor=floor)))

        if retire:
            for origin in retire:
                for key in [k for k in self.last_send_us if k[0] == origin]:
                    del self.last_send_us[key]
            self._append(make_sent_event(self.live, retire))
        return out

    def client_ack(self, seq: int) -> None:
        self.acked[CLIENT] = max(self.acked.get(CLIENT, 0), seq)

    # --- rewind -------------------------------------------------------------------------------

    def rewind(self, rewind_to: int) -> None:
        if rewind_to < self.flushed:
            raise PartitionError(f"rewind to {rewind_to} would cut below the durable "
                                 f"prefix at {self.flushed}")
        retained = [ev for ev in self.pending if ev.pos <= rewind_to]
        self.live = self.durable.clone()
        for ev in retained:
            apply_event(self.live, ev)
        self.pending = retained
        for key in [k for k in self.last_send_us if k[0] > rewind_to]:
            del self.last_send_us[key]
        notice = self.spec.on_rewind(rewind_to)
        self.ctl_out.append(("*", notice))
        self.observer.on_rewind(self.pid, rewind_to)
        self.observer.on_incarnation(self.pid, self.spec.incarnation)
