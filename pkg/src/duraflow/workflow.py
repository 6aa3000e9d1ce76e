"""Orchestrations (record/replay) and entities (serialized operations).

An orchestration body is a deterministic generator over an
OrchestrationContext. Each time a batch of messages arrives for the
instance, the body is re-run from the top against the recorded history:
calls it already made are matched against recorded schedule events (and
re-issue nothing), awaits whose results are recorded resume immediately,
and the first unresolved await parks the step. Only genuinely new schedule
events and the batch's arrival events are appended, so completed tasks are
never executed twice and a crash loses at most unrecorded progress.

The body must be deterministic with respect to its history: same history,
same sequence of calls. A divergence (different call kind, name, or input
at a recorded position) raises NondeterminismDetected at the exact call.

Entities are simpler: keyed state plus named operations, applied strictly
in arrival order, one batch per step. Critical sections pin an entity to a
lock key; operation requests not carrying the holder's key are deferred
inside the entity until release. Lock acquisition is chained: the request
travels through the sorted target list, each entity granting locally and
forwarding, and only the last target answers the requester. Sorting makes
lock order canonical, which is what rules out deadlocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Generator

from .errors import (ActivityFailed, HistoryCorrupt, NestedLock, NondeterminismDetected,
                     UnknownOperation)
from .messages import (InstanceId, lock_granted_payload, lock_request_payload, op_payload,
                       op_result_payload, unlock_payload)
from .util import canonical_json, jsoncopy

# --- history ------------------------------------------------------------------

EXECUTION_STARTED = "ExecutionStarted"
TASK_SCHEDULED = "TaskScheduled"
TASK_COMPLETED = "TaskCompleted"
ENTITY_OP_SCHEDULED = "EntityOpScheduled"
ENTITY_OP_COMPLETED = "EntityOpCompleted"
LOCKS_REQUESTED = "LocksRequested"
LOCKS_ACQUIRED = "LocksAcquired"
LOCKS_RELEASED = "LocksReleased"
EXECUTION_COMPLETED = "ExecutionCompleted"

# Events emitted by body calls; replay matches these against the call stream.
ACTION_KINDS = (TASK_SCHEDULED, ENTITY_OP_SCHEDULED, LOCKS_REQUESTED, LOCKS_RELEASED)
# Events that hand a schedule id its outcome.
COMPLETION_KINDS = (TASK_COMPLETED, ENTITY_OP_COMPLETED, LOCKS_ACQUIRED)
SCHEDULE_KINDS = (TASK_SCHEDULED, ENTITY_OP_SCHEDULED, LOCKS_REQUESTED)


@dataclass
class HistoryEvent:
    seq: int
    t: str
    data: dict

    def to_obj(self) -> dict:
        return {"seq": self.seq, "t": self.t, **self.data}

    @staticmethod
    def from_obj(obj: dict) -> "HistoryEvent":
        data = {k: v for k, v in obj.items() if k not in ("seq", "t")}
        return HistoryEvent(obj["seq"], obj["t"], data)

    def encode(self) -> bytes:
        return canonical_json(self.to_obj())


def validate_history(events: list[HistoryEvent], max_len: int = 100_000) -> None:
    if len(events) > max_len:
        raise HistoryCorrupt(f"history length {len(events)} exceeds limit {max_len}")
    scheduled: dict[int, str] = {}
    completed: set[int] = set()
    for i, ev in enumerate(events):
        if ev.seq != i:
            raise HistoryCorrupt(f"event {i} has seq {ev.seq}")
        if (ev.t == EXECUTION_STARTED) != (i == 0):
            raise HistoryCorrupt(f"ExecutionStarted must be exactly the first event (index {i})")
        if ev.t == EXECUTION_COMPLETED and i != len(events) - 1:
            raise HistoryCorrupt("events after ExecutionCompleted")
        if ev.t in SCHEDULE_KINDS:
            sid = _sid_of(ev)
            if sid in scheduled:
                raise HistoryCorrupt(f"schedule id {sid} reused")
            scheduled[sid] = ev.t
        if ev.t in COMPLETION_KINDS:
            sid = _sid_of(ev)
            if sid not in scheduled:
                raise HistoryCorrupt(f"completion for unknown schedule id {sid}")
            if sid in completed:
                raise HistoryCorrupt(f"schedule id {sid} completed twice")
            want = {TASK_COMPLETED: TASK_SCHEDULED, ENTITY_OP_COMPLETED: ENTITY_OP_SCHEDULED,
                    LOCKS_ACQUIRED: LOCKS_REQUESTED}[ev.t]
            if scheduled[sid] != want:
                raise HistoryCorrupt(f"completion kind {ev.t} does not match {scheduled[sid]}")
            completed.add(sid)


def _sid_of(ev: HistoryEvent) -> int:
    for k in ("task_id", "op_id", "lock_id"):
        if k in ev.data:
            return ev.data[k]
    raise HistoryCorrupt(f"event {ev.t} carries no schedule id")


# --- definitions ----------------------------------------------------------------

@dataclass
class WorkflowDefinition:
    name: str
    body: Callable[["OrchestrationContext"], Generator]


@dataclass
class EntityDefinition:
    name: str
    initial_state: Any
    # op name -> fn(state, input) -> (new_state, result)
    operations: dict[str, Callable[[Any, Any], tuple[Any, Any]]]


@dataclass
class WorkflowRegistry:
    workflows: dict[str, WorkflowDefinition] = field(default_factory=dict)
    entities: dict[str, EntityDefinition] = field(default_factory=dict)
    activities: dict[str, Callable[[Any], Any]] = field(default_factory=dict)

    def add_workflow(self, defn: WorkflowDefinition) -> None:
        self.workflows[defn.name] = defn

    def add_entity(self, defn: EntityDefinition) -> None:
        self.entities[defn.name] = defn

    def add_activity(self, name: str, fn: Callable[[Any], Any]) -> None:
        self.activities[name] = fn


# --- awaitables -------------------------------------------------------------------

@dataclass
class PendingCall:
    schedule_id: int
    kind: str  # task | op | lock


@dataclass
class WaitAll:
    items: list[PendingCall]


@dataclass
class LockToken:
    lock_id: int
    lock_key: str
    targets: list[InstanceId]


# --- step outcome -------------------------------------------------------------------

RUNNING = "running"
DONE = "completed"


@dataclass
class StepOutcome:
    kind: str                                   # orchestration | entity
    status: str = RUNNING
    result: Any = None
    new_events: list[HistoryEvent] = field(default_factory=list)
    entity_state: "EntityRuntimeState | None" = None
    produced_messages: list[tuple[InstanceId, dict]] = field(default_factory=list)
    produced_tasks: list[tuple[int, str, Any]] = field(default_factory=list)  # (sid, name, input)


# --- orchestration context & replay ---------------------------------------------------

class OrchestrationContext:
    """The only API an orchestration body may touch.

    Anything else (clocks, randomness, io) breaks replay and will surface
    as NondeterminismDetected on the next recovery.
    """

    def __init__(self, run: "_Run") -> None:
        self._run = run

    def get_input(self) -> Any:
        return jsoncopy(self._run.start_input)

    def call_activity(self, name: str, input: Any = None) -> PendingCall:
        sid = self._run.action(TASK_SCHEDULED, {"task_name": name, "input": input})
        return PendingCall(sid, "task")

    def call_entity(self, target: InstanceId, op: str, input: Any = None) -> PendingCall:
        data = {"target": target.to_obj(), "op_name": op, "input": input}
        held = self._run.held_lock
        if held is not None and target in held.targets:
            data["lock_key"] = held.lock_key
        sid = self._run.action(ENTITY_OP_SCHEDULED, data)
        return PendingCall(sid, "op")

    def lock(self, targets: list[InstanceId]) -> PendingCall:
        if self._run.held_lock is not None or self._run.lock_outstanding:
            raise NestedLock("critical sections do not nest")
        if not targets:
            raise ValueError("lock wants at least one target")
        ordered = sorted(set(targets))
        self._run.lock_outstanding = True
        sid = self._run.action(
            LOCKS_REQUESTED,
            {"targets": [t.to_obj() for t in ordered]},
            lock_key_for=ordered)
        return PendingCall(sid, "lock")

    def release(self, token: LockToken) -> None:
        if self._run.held_lock is None or self._run.held_lock.lock_id != token.lock_id:
            return  # idempotent: releasing twice is a no-op
        self._run.action(LOCKS_RELEASED, {"lock_id": token.lock_id, "lock_key": token.lock_key},
                         is_release=True)
        self._run.held_lock = None

    def wait_all(self, items: list[PendingCall]) -> WaitAll:
        return WaitAll(list(items))


class _Run:
    def __init__(self, instance: InstanceId, events: list[HistoryEvent]) -> None:
        self.instance = instance
        self.events = events                      # full history incl. this step's arrivals
        self.new_events: list[HistoryEvent] = []  # appended this step
        self.produced: list[tuple[InstanceId, dict]] = []
        self.tasks: list[tuple[int, str, Any]] = []
        self.held_lock: LockToken | None = None
        self.lock_outstanding = False

        self.start_input: Any = None
        self.recorded_actions: list[HistoryEvent] = []
        self.completions: dict[int, HistoryEvent] = {}
        self.lock_targets: dict[int, list[InstanceId]] = {}
        self.next_sid = 0
        for ev in events:
            if ev.t == EXECUTION_STARTED:
                self.start_input = ev.data["input"]
            if ev.t in ACTION_KINDS:
                self.recorded_actions.append(ev)
            if ev.t in SCHEDULE_KINDS:
                self.next_sid += 1
            if ev.t in COMPLETION_KINDS:
                self.completions[_sid_of(ev)] = ev
            if ev.t == LOCKS_REQUESTED:
                self.lock_targets[ev.data["lock_id"]] = [
                    InstanceId.from_obj(t) for t in ev.data["targets"]]
        self.action_cursor = 0

    def append(self, t: str, data: dict) -> HistoryEvent:
        ev = HistoryEvent(len(self.events), t, data)
        self.events.append(ev)
        self.new_events.append(ev)
        return ev

    def action(self, t: str, data: dict, lock_key_for: list[InstanceId] | None = None,
               is_release: bool = False) -> int:
        """One body call: match the recorded action at the cursor or record anew."""
        if self.action_cursor < len(self.recorded_actions):
            rec = self.recorded_actions[self.action_cursor]
            self.action_cursor += 1
            sid = _sid_of(rec)
            probe = dict(data)
            if lock_key_for is not None:
                probe["lock_id"] = sid
                probe["lock_key"] = _lock_key(self.instance, sid)
            elif not is_release:
                probe[{TASK_SCHEDULED: "task_id", ENTITY_OP_SCHEDULED: "op_id"}[t]] = sid
            if rec.t != t or canonical_json(rec.data) != canonical_json(probe):
                raise NondeterminismDetected(
                    f"replay diverged at action {self.action_cursor - 1}: recorded "
                    f"{rec.t} {rec.data!r}, code performed {t} {probe!r}")
            return sid

        if is_release:
            ev = self.append(t, data)
            _release_messages(self, ev)
            return data["lock_id"]
        sid = self.next_sid
        self.next_sid += 1
        full = dict(data)
        if lock_key_for is not None:
            full["lock_id"] = sid
            full["lock_key"] = _lock_key(self.instance, sid)
            self.lock_targets[sid] = lock_key_for
        else:
            full[{TASK_SCHEDULED: "task_id", ENTITY_OP_SCHEDULED: "op_id"}[t]] = sid
        self.append(t, full)
        self.emit_effects(t, sid, full)
        return sid

    def emit_effects(self, t: str, sid: int, data: dict) -> None:
        if t == TASK_SCHEDULED:
            self.tasks.append((sid, data["task_name"], data["input"]))
        elif t == ENTITY_OP_SCHEDULED:
            target = InstanceId.from_obj(data["target"])
            self.produced.append((target, op_payload(sid, data["op_name"], data["input"],
                                                     self.instance, data.get("lock_key"))))
        elif t == LOCKS_REQUESTED:
            targets = self.lock_targets[sid]
            self.produced.append((targets[0], lock_request_payload(
                data["lock_key"], targets, 0, self.instance, sid)))

    def resolve(self, call: PendingCall) -> tuple[bool, Any, Exception | None]:
        ev = self.completions.get(call.schedule_id)
        if ev is None:
            return False, None, None
        if ev.t == LOCKS_ACQUIRED:
            sid = call.schedule_id
            token = LockToken(sid, ev.data["lock_key"], self.lock_targets[sid])
            self.held_lock = token
            self.lock_outstanding = False
            return True, token, None
        if ev.data.get("failed"):
            return True, None, ActivityFailed(str(ev.data.get("result")))
        return True, jsoncopy(ev.data.get("result")), None


def _lock_key(instance: InstanceId, sid: int) -> str:
    return f"{instance.skey}#{sid}"


def _release_messages(run: _Run, ev: HistoryEvent) -> None:
    targets = run.lock_targets.get(ev.data["lock_id"], [])
    for t in targets:
        run.produced.append((t, unlock_payload(ev.data["lock_key"])))


def execute_orchestration_step(defn: WorkflowDefinition, instance: InstanceId,
                               history: list[HistoryEvent], arrivals: list[dict],
                               max_history: int = 100_000) -> StepOutcome:
    """Append this batch's arrival events, re-run the body, collect effects.

    `history` is not mutated; the outcome's new_events are what the caller
    appends (and persists) for this step.
    """
    validate_history(history, max_history)
    if history and history[-1].t == EXECUTION_COMPLETED:
        # Late or duplicate messages after completion are consumed and dropped.
        return StepOutcome(kind="orchestration", status=DONE,
                           result=history[-1].data.get("result"))

    events = list(history)
    run = _Run(instance, events)

    started = bool(history)
    scheduled_ids = {(_sid_of(ev)) for ev in history if ev.t in SCHEDULE_KINDS}
    for payload in arrivals:
        if "start" in payload:
            if started:
                continue
            body = payload["start"]
            if body["workflow"] != defn.name:
                raise HistoryCorrupt(
                    f"start names workflow {body['workflow']!r}, instance runs {defn.name!r}")
            run.append(EXECUTION_STARTED, {"name": defn.name, "input": body["input"]})
            run.start_input = body["input"]
            started = True
        elif "task_result" in payload:
            body = payload["task_result"]
            sid = body["task_id"]
            if sid not in scheduled_ids or sid in run.completions:
                continue
            data = {"task_id": sid, "result": body["result"]}
            if body.get("failed"):
                data["failed"] = True
            run.completions[sid] = run.append(TASK_COMPLETED, data)
        elif "op_result" in payload:
            body = payload["op_result"]
            sid = body["op_id"]
            if sid not in scheduled_ids or sid in run.completions:
                continue
            data = {"op_id": sid, "result": body["result"]}
            if body.get("failed"):
                data["failed"] = True
            run.completions[sid] = run.append(ENTITY_OP_COMPLETED, data)
        elif "lock_granted" in payload:
            body = payload["lock_granted"]
            sid = body["lock_id"]
            if sid not in scheduled_ids or sid in run.completions:
                continue
            run.completions[sid] = run.append(
                LOCKS_ACQUIRED, {"lock_id": sid, "lock_key": body["lock_key"]})
        else:
            continue  # unknown payloads are consumed without effect

    if not started:
        raise HistoryCorrupt("first message for an orchestration must be its start")
    if len(events) > max_history:
        raise HistoryCorrupt(f"history length {len(events)} exceeds limit {max_history}")

    ctx = OrchestrationContext(run)
    gen = defn.body(ctx)
    status = RUNNING
    result: Any = None
    to_send: Any = None
    to_throw: Exception | None = None
    while True:
        try:
            yielded = gen.throw(to_throw) if to_throw is not None else gen.send(to_send)
        except StopIteration as stop:
            status = DONE
            result = stop.value
            break
        to_send, to_throw = None, None
        if isinstance(yielded, PendingCall):
            ready, value, exc = run.resolve(yielded)
            if not ready:
                break
            to_send, to_throw = value, exc
        elif isinstance(yielded, WaitAll):
            values = []
            pending = False
            for item in yielded.items:
                ready, value, exc = run.resolve(item)
                if not ready:
                    pending = True
                    break
                if exc is not None and to_throw is None:
                    to_throw = exc  # all must finish, then the first failure wins
                values.append(value)
            if pending:
                break
            if to_throw is None:
                to_send = values
        else:
            raise NondeterminismDetected(
                f"orchestration yielded {type(yielded).__name__}, not an awaitable")

    if status == DONE:
        run.append(EXECUTION_COMPLETED, {"result": result})
    return StepOutcome(kind="orchestration", status=status, result=result,
                       new_events=run.new_events, produced_messages=run.produced,
                       produced_tasks=run.tasks)


# --- entities -------------------------------------------------------------------------

@dataclass
class EntityRuntimeState:
    user_state: Any = None
    lock_holder: str | None = None
    lock_queue: list[dict] = field(default_factory=list)   # pending lock-request bodies
    deferred: list[dict] = field(default_factory=list)     # deferred op bodies

    def to_obj(self) -> dict:
        return {"user_state": self.user_state, "lock_holder": self.lock_holder,
                "lock_queue": self.lock_queue, "deferred": self.deferred}

    @staticmethod
    def from_obj(obj: dict) -> "EntityRuntimeState":
        return EntityRuntimeState(obj["user_state"], obj["lock_holder"],
                                  list(obj["lock_queue"]), list(obj["deferred"]))


def fresh_entity_state(defn: EntityDefinition) -> EntityRuntimeState:
    return EntityRuntimeState(user_state=jsoncopy(defn.initial_state))


def _grant(body: dict, outputs: list[tuple[InstanceId, dict]]) -> str:
    """Grant a queued/arriving lock request locally; forward or answer."""
    targets = [InstanceId.from_obj(t) for t in body["targets"]]
    idx = body["idx"]
    if idx + 1 < len(targets):
        fwd = dict(body)
        fwd["idx"] = idx + 1
        outputs.append((targets[idx + 1], {"lock": fwd}))
    else:
        requester = InstanceId.from_obj(body["requester"])
        outputs.append((requester, lock_granted_payload(body["lock_id"], body["lock_key"])))
    return body["lock_key"]


def _run_op(defn: EntityDefinition, state: EntityRuntimeState, body: dict,
            outputs: list[tuple[InstanceId, dict]]) -> None:
    name = body["name"]
    if name not in defn.operations:
        raise UnknownOperation(f"entity {defn.name} has no operation {name!r}")
    try:
        new_state, result = defn.operations[name](state.user_state, body["input"])
        state.user_state = new_state
        failed = False
    except Exception as exc:  # user code failure becomes a failed result
        result = f"{type(exc).__name__}: {exc}"
        failed = True
    respond_to = InstanceId.from_obj(body["respond_to"])
    outputs.append((respond_to, op_result_payload(body["op_id"], result, failed)))


def execute_entity_step(defn: EntityDefinition, state: EntityRuntimeState,
                        arrivals: list[dict]) -> tuple[EntityRuntimeState, list[tuple[InstanceId, dict]]]:
    """Apply one batch of arrivals in order; returns (new state, outputs).

    The input state is not mutated; callers persist the returned one.
    """
    st = EntityRuntimeState.from_obj(jsoncopy(state.to_obj()))
    outputs: list[tuple[InstanceId, dict]] = []
    for payload in arrivals:
        if "op" in payload:
            body = payload["op"]
            if st.lock_holder is not None and body.get("lock") != st.lock_holder:
                st.deferred.append(body)
            else:
                _run_op(defn, st, body, outputs)
        elif "lock" in payload:
            body = payload["lock"]
            if st.lock_holder is None:
                st.lock_holder = _grant(body, outputs)
            else:
                st.lock_queue.append(body)
        elif "unlock" in payload:
            key = payload["unlock"]["lock_key"]
            if st.lock_holder != key:
                continue  # duplicate or stale release
            if st.lock_queue:
                st.lock_holder = _grant(st.lock_queue.pop(0), outputs)
            else:
                st.lock_holder = None
                drained, st.deferred = st.deferred, []
                for body in drained:
                    _run_op(defn, st, body, outputs)
        # unknown payloads are consumed without effect
    return st, outputs
