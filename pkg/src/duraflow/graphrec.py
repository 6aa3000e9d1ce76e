"""Builds an execution graph from partition events, for commit checking.

The recorder watches every partition from the harness side and mirrors the
commit log into graph vertices:

  * a logged StepCompleted / TaskFinished becomes a step / task vertex tied
    to its (partition, logpos); attempts that never reach the log leave no
    vertex at all,
  * a message admitted with no known producer is external input, so it gets
    an input vertex (born persisted: the client queue is durable before the
    engine ever sees the message),
  * a flush persists every completed vertex at covered positions,
  * a rewind or crash aborts everything above the surviving position, and
    the abort closure drags dependents on other partitions along.

Re-executions after a rewind reuse positions, message ids and ordinals (the
counters live in partition state), so one position can hold a stack of
attempt vertices of which at most the last is non-aborted.

Delivering a completion report to the client is recorded as a step of a
per-client pseudo instance. That makes the exactly-once bullets bite on the
engine's outward edge too: a duplicate delivery shows up as a double
consumption, a lost one as a dangling live message in a complete run.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import model
from .errors import GraphError
from .messages import InstanceId, Message
from .partition import MessagesReceived, StepCompleted, TaskFinished
from .runtime import Observer


@dataclass
class GraphRecorder(Observer):
    paranoid: bool = False   # re-check all levels at every flush and rewind
    graph: model.ExecutionGraph = field(default_factory=model.new_graph)
    # pid -> logpos -> attempt vids, oldest first (all incarnations)
    _at: dict[int, dict[int, list[str]]] = field(default_factory=dict)
    # pid -> logpos -> the current incarnation's vertex there, if any;
    # abort_above evicts entries above the surviving position
    _live_at: dict[int, dict[int, str]] = field(default_factory=dict)
    _persisted_upto: dict[int, int] = field(default_factory=dict)
    # (pid, task_id) -> (dispatch msg id, task name); rewrites are re-executions
    _taskinfo: dict[tuple[int, str], tuple[str, str]] = field(default_factory=dict)
    _client_steps: dict[str, int] = field(default_factory=dict)

    def _new_vid(self, pid: int, pos: int) -> str:
        slot = self._at.setdefault(pid, {}).setdefault(pos, [])
        vid = f"p{pid}x{pos}" if not slot else f"p{pid}x{pos}r{len(slot)}"
        slot.append(vid)
        return vid

    # --- Observer hooks ---------------------------------------------------

    def on_event(self, pid: int, ev) -> None:
        if isinstance(ev, MessagesReceived):
            for msg in ev.admitted:
                if msg.id not in self.graph._producers:
                    model.record_work_item(self.graph, model.INPUT, [], [msg.id],
                                           vid=f"in:{msg.id}")
        elif isinstance(ev, StepCompleted):
            produced = [m.id for m in ev.produced_local]
            produced += [s.msg.id for s in ev.produced_remote]
            for spec in ev.produced_tasks:
                produced.append(spec.msg_id)
                self._taskinfo[(pid, spec.task_id)] = (spec.msg_id, spec.task_name)
            vid = model.record_work_item(
                self.graph, model.STEP, list(ev.consumed), produced,
                instance=InstanceId.from_skey(ev.skey), ordinal=ev.ordinal + 1,
                vid=self._new_vid(pid, ev.pos))
            self._complete(pid, ev.pos, vid)
        elif isinstance(ev, TaskFinished):
            try:
                msg_id, task_name = self._taskinfo[(pid, ev.task_id)]
            except KeyError:
                raise GraphError(f"task {ev.task_id} finished but was never dispatched") from None
            vid = model.record_work_item(
                self.graph, model.TASK, [msg_id], [ev.result_msg.id],
                task_name=task_name, vid=self._new_vid(pid, ev.pos))
            self._complete(pid, ev.pos, vid)
        # MessagesSent is outbox bookkeeping, not a work item

    def _complete(self, pid: int, pos: int, vid: str) -> None:
        cur = self._live_at.setdefault(pid, {})
        old = cur.get(pos)
        if old is not None and self.graph.vertices[old].progress != model.ABORTED:
            raise GraphError(f"p{pid}@{pos}: position reused while {old} is still live")
        cur[pos] = vid
        model.advance_progress(self.graph, vid, model.COMPLETED)
        # Work recorded on top of an already-aborted dependency is phantom
        # output: the partition is speculating past a crash it has not been
        # told about, and its own rewind is already inevitable.
        if model.born_doomed(self.graph, vid):
            model.advance_progress(self.graph, vid, model.ABORTED)

    def on_flush(self, pid: int, upto: int) -> None:
        start = self._persisted_upto.get(pid, -1) + 1
        by_pos = self._live_at.get(pid, {})
        for pos in range(start, upto + 1):
            vid = by_pos.get(pos)
            if vid is None:
                continue  # admissions and other non-work events
            if self.graph.vertices[vid].progress != model.COMPLETED:
                # Flushing a doomed attempt would persist state that depends
                # on a crashed peer's discarded output: the one thing the
                # speculation barrier exists to prevent.
                raise GraphError(f"p{pid}@{pos}: flush covered {vid} in state "
                                 f"{self.graph.vertices[vid].progress}")
            model.advance_progress(self.graph, vid, model.PERSISTED)
        self._persisted_upto[pid] = max(upto, self._persisted_upto.get(pid, -1))
        if self.paranoid:
            self.assert_consistent()

    def on_rewind(self, pid: int, rewind_to: int) -> None:
        self.abort_above(pid, rewind_to)

    # --- harness entry points ----------------------------------------------

    def abort_above(self, pid: int, keep_upto: int) -> None:
        """Abort every vertex logged above keep_upto, with its closure.

        Called on rewind (keep_upto = rewind position) and on crash
        (keep_upto = last flushed position; the unflushed suffix died with
        the process memory).
        """
        doomed = [vid
                  for pos, vids in self._at.get(pid, {}).items() if pos > keep_upto
                  for vid in vids]
        for vid in doomed:
            if self.graph.vertices[vid].progress == model.ABORTED:
                continue
            for dead in sorted(model.abort_closure(self.graph, vid)):
                if self.graph.vertices[dead].progress != model.ABORTED:
                    model.advance_progress(self.graph, dead, model.ABORTED)
        cur = self._live_at.get(pid)
        if cur:
            for pos in [p for p in cur if p > keep_upto]:
                del cur[pos]
        if self.paranoid:
            self.assert_consistent()

    def client_delivery(self, client: str, msg: Message) -> None:
        """One report handed to the client; exactly-once is checked, not assumed."""
        ordinal = self._client_steps.get(client, 0) + 1
        self._client_steps[client] = ordinal
        vid = model.record_work_item(self.graph, model.STEP, [msg.id],
                                     instance=InstanceId("client", client), ordinal=ordinal,
                                     vid=f"{client}x{ordinal}")
        # reports only go out flushed, so the delivery is durable immediately
        model.advance_progress(self.graph, vid, model.COMPLETED)
        model.advance_progress(self.graph, vid, model.PERSISTED)
        if self.paranoid:
            self.assert_consistent()

    def mark_complete(self) -> None:
        self.graph.complete = True

    def assert_consistent(self) -> None:
        rep = model.check_consistency(self.graph)
        rep.violations += model.check_ccc_properties(self.graph).violations
        if not rep.ok:
            raise GraphError("; ".join(rep.violations))
