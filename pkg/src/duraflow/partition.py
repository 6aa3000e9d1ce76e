"""Partition state as a deterministic fold over a commit log.

Everything a partition owns lives in PartitionState: instance records,
session buffers of undelivered messages, the pending-task table, the
outbox of not-yet-acknowledged sends, the input-queue read position, and
per-source dedup floors. Exactly four event kinds mutate it:

* MessagesReceived  admits a batch from the input queue or from peers,
* StepCompleted     consumes a session prefix and applies one instance step,
* TaskFinished      retires a pending task and admits its result message,
* MessagesSent      drops outbox entries whose receivers acknowledged.

State is a pure function of the event sequence: apply_event validates
position contiguity and re-derives every assigned identity (message ids,
per-target sequence numbers, task ids, step ordinals), so a divergent
replay fails loudly instead of silently forking. Identities are assigned
from counters inside the state, which is what makes an in-memory rewind
(drop the unflushed suffix, fold again) re-assign byte-identical ids on
re-execution.

Scheduling is not part of the fold. next_step_plan and ready_tasks are
pure queries; the owner loop decides when to call them and how to gate on
the flushed position (conservative mode refuses to act on anything whose
producing record is not yet durable; the speculative modes do not).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .errors import (NonContiguousEvent, NoStepInProgress, PartitionError, QueueGap,
                     UnknownTaskId)
from .messages import InstanceId, Message, TaskSpec, partition_of
from .util import canonical_json, jsoncopy
from .workflow import DONE, RUNNING, EntityRuntimeState, HistoryEvent

CLIENT = "c0"  # pseudo-target for completion reports


def pname(pid: int) -> str:
    return f"p{pid}"


# --- state -------------------------------------------------------------------

@dataclass
class SessionEntry:
    msg: Message
    arrival: int  # partition-wide admission ordinal; scheduling picks oldest head

    def to_obj(self) -> dict:
        return {"msg": self.msg.to_obj(), "arrival": self.arrival}

    @staticmethod
    def from_obj(obj: dict) -> "SessionEntry":
        return SessionEntry(Message.from_obj(obj["msg"]), obj["arrival"])


@dataclass
class RemoteSend:
    target_key: str  # "p<k>" or the client key
    seq: int         # per (this partition -> target_key) stream, from 1
    msg: Message

    def to_obj(self) -> dict:
        return {"target_key": self.target_key, "seq": self.seq, "msg": self.msg.to_obj()}

    @staticmethod
    def from_obj(obj: dict) -> "RemoteSend":
        return RemoteSend(obj["target_key"], obj["seq"], Message.from_obj(obj["msg"]))


@dataclass
class OutboxEntry:
    origin_logpos: int
    sends: list[RemoteSend]

    def to_obj(self) -> dict:
        return {"origin_logpos": self.origin_logpos, "sends": [s.to_obj() for s in self.sends]}

    @staticmethod
    def from_obj(obj: dict) -> "OutboxEntry":
        return OutboxEntry(obj["origin_logpos"], [RemoteSend.from_obj(s) for s in obj["sends"]])


@dataclass
class InstanceRecord:
    kind: str                       # orchestration | entity
    status: str = RUNNING
    result: Any = None
    req: str | None = None          # request id carried by the start message, if any
    history: list[HistoryEvent] = field(default_factory=list)
    entity_state: EntityRuntimeState | None = None
    steps: int = 0                  # completed steps; doubles as the next ordinal
    last_update_logpos: int = 0

    def to_obj(self) -> dict:
        return {"kind": self.kind, "status": self.status, "result": self.result,
                "req": self.req,
                "history": [ev.to_obj() for ev in self.history],
                "entity_state": None if self.entity_state is None else self.entity_state.to_obj(),
                "steps": self.steps, "last_update_logpos": self.last_update_logpos}

    @staticmethod
    def from_obj(obj: dict) -> "InstanceRecord":
        es = obj["entity_state"]
        return InstanceRecord(
            obj["kind"], obj["status"], obj["result"], obj["req"],
            [HistoryEvent.from_obj(e) for e in obj["history"]],
            None if es is None else EntityRuntimeState.from_obj(es),
            obj["steps"], obj["last_update_logpos"])


@dataclass
class PartitionState:
    pid: int
    partitions: int
    log_len: int = 0          # events applied; the next event's pos
    queue_position: int = 0   # input-queue envelopes consumed
    arrivals: int = 0         # admission ordinal counter
    msg_counter: int = 0      # local message ids: p<pid>m<n>
    task_counter: int = 0     # task ids: p<pid>t<n>
    dedup: dict[str, int] = field(default_factory=dict)    # source -> max seq admitted
    out_seq: dict[str, int] = field(default_factory=dict)  # target_key -> last seq used
    sessions: dict[str, list[SessionEntry]] = field(default_factory=dict)
    instances: dict[str, InstanceRecord] = field(default_factory=dict)
    outbox: list[OutboxEntry] = field(default_factory=list)
    tasks: dict[str, TaskSpec] = field(default_factory=dict)

    def to_obj(self) -> dict:
        return {
            "pid": self.pid, "partitions": self.partitions, "log_len": self.log_len,
            "queue_position": self.queue_position, "arrivals": self.arrivals,
            "msg_counter": self.msg_counter, "task_counter": self.task_counter,
            "dedup": dict(sorted(self.dedup.items())),
            "out_seq": dict(sorted(self.out_seq.items())),
            "sessions": {k: [e.to_obj() for e in v]
                         for k, v in sorted(self.sessions.items()) if v},
            "instances": {k: r.to_obj() for k, r in sorted(self.instances.items())},
            "outbox": [e.to_obj() for e in self.outbox],
            "tasks": {k: t.to_obj() for k, t in sorted(self.tasks.items())},
        }

    def encode(self) -> bytes:
        return canonical_json(self.to_obj())

    @staticmethod
    def from_obj(obj: dict) -> "PartitionState":
        st = PartitionState(obj["pid"], obj["partitions"], obj["log_len"],
                            obj["queue_position"], obj["arrivals"], obj["msg_counter"],
                            obj["task_counter"], dict(obj["dedup"]), dict(obj["out_seq"]))
        st.sessions = {k: [SessionEntry.from_obj(e) for e in v]
                       for k, v in obj["sessions"].items()}
        st.instances = {k: InstanceRecord.from_obj(r) for k, r in obj["instances"].items()}
        st.outbox = [OutboxEntry.from_obj(e) for e in obj["outbox"]]
        st.tasks = {k: TaskSpec.from_obj(t) for k, t in obj["tasks"].items()}
        return st

    def clone(self) -> "PartitionState":
        return PartitionState.from_obj(jsoncopy(self.to_obj()))


def new_state(pid: int, partitions: int) -> PartitionState:
    return PartitionState(pid, partitions)


# --- events --------------------------------------------------------------------

@dataclass
class MessagesReceived:
    pos: int
    new_queue_position: int | None   # None for peer batches
    admitted: list[Message]          # already rewritten: ready_at 0, tag kept for audit
    dedup_updates: dict[str, int]    # source -> max admitted seq in this batch

    def to_obj(self) -> dict:
        return {"k": "recv", "pos": self.pos, "new_queue_position": self.new_queue_position,
                "admitted": [m.to_obj() for m in self.admitted],
                "dedup_updates": dict(sorted(self.dedup_updates.items()))}


@dataclass
class MessagesSent:
    pos: int
    origins: list[int]  # origin_logpos of fully acknowledged outbox entries

    def to_obj(self) -> dict:
        return {"k": "sent", "pos": self.pos, "origins": list(self.origins)}


@dataclass
class TaskFinished:
    pos: int
    task_id: str
    result_msg: Message  # ready_at == pos; speculative modes may act on it pre-flush

    def to_obj(self) -> dict:
        return {"k": "task", "pos": self.pos, "task_id": self.task_id,
                "result_msg": self.result_msg.to_obj()}


@dataclass
class StepCompleted:
    pos: int
    skey: str
    ordinal: int
    consumed: list[str]                      # message ids, exact session head prefix
    status: str
    result: Any
    history_delta: list[HistoryEvent] | None  # orchestration steps
    entity_state: dict | None                 # entity steps: full replacement state
    produced_local: list[Message]             # ready_at == pos
    produced_remote: list[RemoteSend]
    produced_tasks: list[TaskSpec]            # origin_logpos == pos

    def to_obj(self) -> dict:
        return {"k": "step", "pos": self.pos, "skey": self.skey, "ordinal": self.ordinal,
                "consumed": list(self.consumed), "status": self.status, "result": self.result,
                "history_delta": None if self.history_delta is None
                else [e.to_obj() for e in self.history_delta],
                "entity_state": self.entity_state,
                "produced_local": [m.to_obj() for m in self.produced_local],
                "produced_remote": [s.to_obj() for s in self.produced_remote],
                "produced_tasks": [t.to_obj() for t in self.produced_tasks]}


PEvent = MessagesReceived | MessagesSent | TaskFinished | StepCompleted


def event_to_obj(ev: PEvent) -> dict:
    return ev.to_obj()


def event_from_obj(obj: dict) -> PEvent:
    k = obj["k"]
    if k == "recv":
        return MessagesReceived(obj["pos"], obj["new_queue_position"],
                                [Message.from_obj(m) for m in obj["admitted"]],
                                dict(obj["dedup_updates"]))
    if k == "sent":
        return MessagesSent(obj["pos"], list(obj["origins"]))
    if k == "task":
        return TaskFinished(obj["pos"], obj["task_id"], Message.from_obj(obj["result_msg"]))
    if k == "step":
        hd = obj["history_delta"]
        return StepCompleted(obj["pos"], obj["skey"], obj["ordinal"], list(obj["consumed"]),
                             obj["status"], obj["result"],
                             None if hd is None else [HistoryEvent.from_obj(e) for e in hd],
                             obj["entity_state"],
                             [Message.from_obj(m) for m in obj["produced_local"]],
                             [RemoteSend.from_obj(s) for s in obj["produced_remote"]],
                             [TaskSpec.from_obj(t) for t in obj["produced_tasks"]])
    raise PartitionError(f"unknown event kind {k!r}")


# --- the fold ---------------------------------------------------------------------

def _admit(state: PartitionState, msg: Message) -> None:
    skey = msg.target.skey
    state.sessions.setdefault(skey, []).append(SessionEntry(msg, state.arrivals))
    state.arrivals += 1


def apply_event(state: PartitionState, ev: PEvent) -> None:
    if ev.pos != state.log_len:
        raise NonContiguousEvent(f"event pos {ev.pos}, state expects {state.log_len}")

    if isinstance(ev, MessagesReceived):
        if ev.new_queue_position is not None:
            if ev.new_queue_position < state.queue_position:
                raise QueueGap(f"queue position moving back: {ev.new_queue_position} "
                               f"< {state.queue_position}")
            state.queue_position = ev.new_queue_position
        for source, seq in sorted(ev.dedup_updates.items()):
            if seq <= state.dedup.get(source, 0):
                raise PartitionError(f"dedup for {source} not advancing: {seq}")
            state.dedup[source] = seq
        for msg in ev.admitted:
            if msg.ready_at != 0:
                raise PartitionError(f"admitted message {msg.id} carries ready_at "
                                     f"{msg.ready_at}; arrivals are always ready")
            _admit(state, msg)

    elif isinstance(ev, MessagesSent):
        have = {e.origin_logpos: i for i, e in enumerate(state.outbox)}
        for origin in ev.origins:
            if origin not in have:
                raise PartitionError(f"no outbox entry with origin {origin}")
        drop = set(ev.origins)
        state.outbox = [e for e in state.outbox if e.origin_logpos not in drop]

    elif isinstance(ev, TaskFinished):
        if ev.task_id not in state.tasks:
            raise UnknownTaskId(ev.task_id)
        spec = state.tasks.pop(ev.task_id)
        msg = ev.result_msg
        if msg.id != f"p{state.pid}m{state.msg_counter}":
            raise PartitionError(f"task result id {msg.id} out of sequence")
        if msg.ready_at != ev.pos:
            raise PartitionError("task result must be gated on its own record")
        if msg.target != spec.respond_to:
            raise PartitionError("task result aimed at the wrong instance")
        state.msg_counter += 1
        state.sessions.setdefault(msg.target.skey, []).append(
            SessionEntry(msg, state.arrivals))
        state.arrivals += 1

    elif isinstance(ev, StepCompleted):
        _apply_step(state, ev)

    else:
        raise PartitionError(f"unknown event {ev!r}")

    state.log_len += 1


def _apply_step(state: PartitionState, ev: StepCompleted) -> None:
    buf = state.sessions.get(ev.skey, [])
    if len(buf) < len(ev.consumed):
        raise NoStepInProgress(f"step consumes {len(ev.consumed)} messages, "
                               f"session {ev.skey} holds {len(buf)}")
    for i, mid in enumerate(ev.consumed):
        if buf[i].msg.id != mid:
            raise PartitionError(f"step consumed {mid} but session head is {buf[i].msg.id}")
    consumed_msgs = [e.msg for e in buf[:len(ev.consumed)]]
    state.sessions[ev.skey] = buf[len(ev.consumed):]
    if not state.sessions[ev.skey]:
        del state.sessions[ev.skey]

    rec = state.instances.get(ev.skey)
    if rec is None:
        kind = "entity" if ev.entity_state is not None else "orchestration"
        rec = InstanceRecord(kind=kind)
        state.instances[ev.skey] = rec
    if ev.ordinal != rec.steps:
        raise PartitionError(f"step ordinal {ev.ordinal} but instance has {rec.steps} steps")

    if rec.req is None:
        for msg in consumed_msgs:
            body = msg.payload.get("start") if isinstance(msg.payload, dict) else None
            if body and body.get("req"):
                rec.req = body["req"]
                break

    if ev.entity_state is not None:
        rec.entity_state = EntityRuntimeState.from_obj(jsoncopy(ev.entity_state))
    if ev.history_delta is not None:
        for hev in ev.history_delta:
            if hev.seq != len(rec.history):
                raise PartitionError(f"history delta seq {hev.seq} does not extend "
                                     f"history of length {len(rec.history)}")
            rec.history.append(hev)
    rec.status = ev.status
    rec.result = ev.result
    rec.steps += 1
    rec.last_update_logpos = ev.pos

    # identities: locals, remotes, then task-start messages, in event order
    expect = state.msg_counter
    for msg in ev.produced_local:
        if msg.id != f"p{state.pid}m{expect}":
            raise PartitionError(f"local message id {msg.id} out of sequence")
        if msg.ready_at != ev.pos:
            raise PartitionError("locally produced messages are gated on their step record")
        if partition_of(msg.target, state.partitions) != state.pid:
            raise PartitionError(f"message {msg.id} routed local but belongs elsewhere")
        expect += 1
    for send in ev.produced_remote:
        if send.msg.id != f"p{state.pid}m{expect}":
            raise PartitionError(f"remote message id {send.msg.id} out of sequence")
        want = state.out_seq.get(send.target_key, 0) + 1
        if send.seq != want:
            raise PartitionError(f"send seq {send.seq} to {send.target_key}, expected {want}")
        state.out_seq[send.target_key] = send.seq
        expect += 1
    for spec in ev.produced_tasks:
        if spec.msg_id != f"p{state.pid}m{expect}":
            raise PartitionError(f"task start id {spec.msg_id} out of sequence")
        if spec.task_id != f"p{state.pid}t{state.task_counter}":
            raise PartitionError(f"task id {spec.task_id} out of sequence")
        if spec.origin_logpos != ev.pos:
            raise PartitionError("task origin must be its scheduling record")
        state.tasks[spec.task_id] = spec
        state.task_counter += 1
        expect += 1
    state.msg_counter = expect

    for msg in ev.produced_local:
        _admit(state, msg)
    if ev.produced_remote:
        state.outbox.append(OutboxEntry(ev.pos, list(ev.produced_remote)))


def fold_events(pid: int, partitions: int, events: list[PEvent]) -> PartitionState:
    state = new_state(pid, partitions)
    for ev in events:
        apply_event(state, ev)
    return state


# --- event construction (owner-loop side) --------------------------------------------

@dataclass
class Envelope:
    """What actually travels between partitions (and from the client queue).

    seq 0 marks engine control traffic (confirms, recovery notices, acks):
    idempotent, never admitted to a session, exempt from dedup. The floor,
    when present, piggybacks the sender's (incarnation, flushed position)
    so ordinary traffic doubles as speculation confirmation.
    """

    source: str     # "p<k>" or the client key
    seq: int
    msg: Message
    floor: tuple[list[int], int] | None = None

    def to_obj(self) -> dict:
        obj: dict = {"source": self.source, "seq": self.seq, "msg": self.msg.to_obj()}
        if self.floor is not None:
            obj["floor"] = [list(self.floor[0]), self.floor[1]]
        return obj

    @staticmethod
    def from_obj(obj: dict) -> "Envelope":
        floor = None
        if "floor" in obj:
            floor = (list(obj["floor"][0]), obj["floor"][1])
        return Envelope(obj["source"], obj["seq"], Message.from_obj(obj["msg"]), floor)


def make_recv_event(state: PartitionState, envelopes: list[Envelope],
                    new_queue_position: int | None = None,
                    drop_tag: Any = None) -> MessagesReceived | None:
    """Filter a batch against dedup floors and build the admission event.

    drop_tag(msg) -> bool lets the speculation layer reject messages whose
    tag names a rolled-back incarnation; those are dropped without touching
    the dedup floor so the fresh re-send is not mistaken for a duplicate.

    A seq above floor+1 is handled by provenance. The durable queue cannot
    skip, so there it is corruption and raises. On a peer link it is a
    straggler that overtook a loss or our own rewind; anything above floor+1
    is necessarily unacked (acks only ever cover flushed admissions, and
    rewinds never drop below the flush), so the sender will resend it in
    order and we can drop it without recording anything.
    """
    admitted: list[Message] = []
    floors: dict[str, int] = {}
    for env in envelopes:
        floor = max(state.dedup.get(env.source, 0), floors.get(env.source, 0))
        if env.seq <= floor:
            continue  # duplicate delivery
        if drop_tag is not None and env.msg.tag is not None and drop_tag(env.msg):
            continue  # stale speculative send; dedup floor untouched on purpose
        if env.seq != floor + 1:
            if new_queue_position is not None:
                raise QueueGap(f"seq {env.seq} from {env.source} skips past floor {floor}")
            continue  # peer straggler; its resend restores the stream
        floors[env.source] = env.seq
        msg = Message.from_obj(env.msg.to_obj())
        msg.ready_at = 0
        admitted.append(msg)
    if not admitted and new_queue_position in (None, state.queue_position):
        return None
    return MessagesReceived(state.log_len, new_queue_position, admitted, floors)


def make_task_event(state: PartitionState, spec: TaskSpec, payload: dict) -> TaskFinished:
    msg = Message(id=f"p{state.pid}m{state.msg_counter}", target=spec.respond_to,
                  payload=payload, ready_at=state.log_len)
    return TaskFinished(state.log_len, spec.task_id, msg)


def make_sent_event(state: PartitionState, origins: list[int]) -> MessagesSent:
    return MessagesSent(state.log_len, sorted(origins))


@dataclass
class StepPlan:
    instance: InstanceId
    skey: str
    msgs: list[Message]


def eligible_prefix(state: PartitionState, skey: str, conservative: bool,
                    flushed: int) -> list[SessionEntry]:
    out = []
    for entry in state.sessions.get(skey, []):
        # ready_at 0 means the producer is durable elsewhere (queue or peer)
        if conservative and entry.msg.ready_at > 0 and entry.msg.ready_at > flushed:
            break
        out.append(entry)
    return out


def next_step_plan(state: PartitionState, conservative: bool, flushed: int,
                   busy: set[str]) -> StepPlan | None:
    """Oldest-head-first over sessions with an eligible prefix."""
    best: tuple[int, str, list[SessionEntry]] | None = None
    for skey in state.sessions:
        if skey in busy:
            continue
        prefix = eligible_prefix(state, skey, conservative, flushed)
        if not prefix:
            continue
        key = (prefix[0].arrival, skey, prefix)
        if best is None or key[0] < best[0]:
            best = key
    if best is None:
        return None
    _, skey, prefix = best
    return StepPlan(InstanceId.from_skey(skey), skey, [e.msg for e in prefix])


def ready_tasks(state: PartitionState, conservative: bool, flushed: int,
                busy: set[str]) -> list[TaskSpec]:
    out = []
    for tid in sorted(state.tasks, key=lambda t: state.tasks[t].origin_logpos):
        spec = state.tasks[tid]
        if tid in busy:
            continue
        if conservative and spec.origin_logpos > flushed:
            continue
        out.append(spec)
    return out


def make_step_event(state: PartitionState, plan: StepPlan, outcome: Any) -> StepCompleted:
    """Turn a workflow/entity step outcome into the next log event.

    Must be called with the state the event will be applied to: identity
    counters are read here and verified again in apply_event.
    """
    pos = state.log_len
    rec = state.instances.get(plan.skey)
    ordinal = rec.steps if rec is not None else 0

    produced_local: list[Message] = []
    produced_remote: list[RemoteSend] = []
    produced_tasks: list[TaskSpec] = []
    counter = state.msg_counter
    out_seq = dict(state.out_seq)

    def next_id() -> str:
        nonlocal counter
        mid = f"p{state.pid}m{counter}"
        counter += 1
        return mid

    def remote(target_key: str, msg: Message) -> None:
        out_seq[target_key] = out_seq.get(target_key, 0) + 1
        produced_remote.append(RemoteSend(target_key, out_seq[target_key], msg))

    routed: list[tuple[InstanceId, dict]] = list(outcome.produced_messages)
    for target, payload in routed:
        tp = partition_of(target, state.partitions)
        msg = Message(id="", target=target, payload=payload)
        if tp == state.pid:
            msg.ready_at = pos
            produced_local.append(msg)
        else:
            remote(pname(tp), msg)

    report = _completion_report(state, plan, outcome)
    if report is not None:
        remote(CLIENT, report)

    # ids are assigned locals-first to match the fold's verification order
    for msg in produced_local:
        msg.id = next_id()
    for send in produced_remote:
        send.msg.id = next_id()

    task_counter = state.task_counter
    for sid, name, input in getattr(outcome, "produced_tasks", []):
        spec = TaskSpec(task_id=f"p{state.pid}t{task_counter}", msg_id=next_id(),
                        schedule_id=sid, task_name=name, input=input,
                        respond_to=plan.instance, origin_logpos=pos)
        task_counter += 1
        produced_tasks.append(spec)

    hd = outcome.new_events if outcome.kind == "orchestration" else None
    es = outcome.entity_state.to_obj() if outcome.kind == "entity" else None
    return StepCompleted(pos=pos, skey=plan.skey, ordinal=ordinal,
                         consumed=[m.id for m in plan.msgs], status=outcome.status,
                         result=outcome.result, history_delta=hd, entity_state=es,
                         produced_local=produced_local, produced_remote=produced_remote,
                         produced_tasks=produced_tasks)


def _completion_report(state: PartitionState, plan: StepPlan, outcome: Any) -> Message | None:
    if outcome.kind != "orchestration" or outcome.status != DONE:
        return None
    if not any(ev.t == "ExecutionCompleted" for ev in outcome.new_events):
        return None  # stray message consumed after completion; already reported
    rec = state.instances.get(plan.skey)
    req = rec.req if rec is not None and rec.req else None
    if req is None:
        for msg in plan.msgs:
            body = msg.payload.get("start") if isinstance(msg.payload, dict) else None
            if body and body.get("req"):
                req = body["req"]
                break
    if req is None:
        return None
    payload = {"report": {"req": req, "instance": plan.instance.to_obj(),
                          "result": outcome.result}}
    return Message(id="", target=InstanceId("_client", CLIENT), payload=payload)
