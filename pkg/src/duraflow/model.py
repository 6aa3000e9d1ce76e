"""Execution graphs: work items, message/successor edges, progress tracking.

The unit of failure accounting is the work item: an Input (a request
arriving from outside), a Task (one stateless function execution attempt),
or a Step (one state-mutating execution attempt of an instance). Work items
progress through

    in_progress -> completed -> persisted
         \\            \\
          +-> aborted <-+          (persisted and aborted are terminal)

and a run is judged by the graph it leaves behind: vertices for every
attempt (including aborted ones), message edges from producer to consumer,
and successor edges linking consecutive step ordinals of one instance.

The commit guarantee checked here: at every moment the persisted subgraph,
the persisted-or-completed subgraph, and the full non-aborted subgraph must
each describe a plausible failure-free execution. Concretely:

  1. a persisted work item causally depends only on persisted work items;
  2. anything causally depending on an aborted work item is itself aborted;
  3. each message is consumed by at most one non-aborted work item;
  4. in a complete execution, each message produced by a non-aborted work
     item is consumed by exactly one non-aborted work item.

Bullet 4 ranges over live messages only: an aborted producer's output may
dangle forever, its consumers (if any) are forced aborted by bullet 2.

Operations mutate the graph in place and return it; callers serialize
access (the simulator builds graphs from a single logical thread).
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import (IllegalTransition, MessageAlreadyConsumed, PersistedDependsOnAborted,
                     TraceFormatError, UnknownMessage, UnknownVertex)
from .messages import InstanceId
from .util import qtoken, unqtoken

IN_PROGRESS = "in_progress"
COMPLETED = "completed"
PERSISTED = "persisted"
ABORTED = "aborted"

PROGRESS_STATES = (IN_PROGRESS, COMPLETED, PERSISTED, ABORTED)

LEGAL_TRANSITIONS: dict[str, tuple[str, ...]] = {
    IN_PROGRESS: (COMPLETED, ABORTED),
    COMPLETED: (PERSISTED, ABORTED),
    PERSISTED: (),
    ABORTED: (),
}

INPUT = "input"
TASK = "task"
STEP = "step"


@dataclass
class ExecutionVertex:
    vid: str
    kind: str                       # input | task | step
    progress: str
    consumed: list[str] = field(default_factory=list)
    produced: list[str] = field(default_factory=list)
    task_name: str | None = None    # task vertices
    instance: InstanceId | None = None  # step vertices
    ordinal: int | None = None      # step vertices, 1-based per instance


@dataclass
class ExecutionGraph:
    vertices: dict[str, ExecutionVertex] = field(default_factory=dict)
    msg_edges: list[tuple[str, str, str]] = field(default_factory=list)  # (producer, consumer, msgid)
    succ_edges: list[tuple[str, str]] = field(default_factory=list)
    complete: bool = False
    _vseq: int = 0
    # msgid -> producing vertex ids, in production order (re-executions reuse ids)
    _producers: dict[str, list[str]] = field(default_factory=dict)
    _consumers: dict[str, list[str]] = field(default_factory=dict)
    # (instance.skey, ordinal) -> vertex ids in creation order
    _steps_at: dict[tuple[str, int], list[str]] = field(default_factory=dict)
    # vid -> the producer/predecessor vids it was linked to at record time
    _deps: dict[str, list[str]] = field(default_factory=dict)

    def vertex(self, vid: str) -> ExecutionVertex:
        try:
            return self.vertices[vid]
        except KeyError:
            raise UnknownVertex(vid) from None


@dataclass
class Report:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def new_graph() -> ExecutionGraph:
    return ExecutionGraph()


def _fresh_vid(graph: ExecutionGraph, prefix: str) -> str:
    graph._vseq += 1
    return f"{prefix}{graph._vseq}"


def _latest_live_producer(graph: ExecutionGraph, msgid: str) -> str:
    vids = graph._producers.get(msgid)
    if not vids:
        raise UnknownMessage(f"message {msgid} was never produced")
    for vid in reversed(vids):
        if graph.vertices[vid].progress != ABORTED:
            return vid
    # All producers aborted: attach the edge to the latest attempt anyway so
    # the dependency is visible; bullet 2 will force the consumer aborted.
    return vids[-1]


def _register_produced(graph: ExecutionGraph, vid: str, msgids: list[str]) -> None:
    v = graph.vertices[vid]
    for m in msgids:
        v.produced.append(m)
        graph._producers.setdefault(m, []).append(vid)


def record_work_item(graph: ExecutionGraph, kind: str, consumed: list[str],
                     produced: list[str] | None = None, *, task_name: str | None = None,
                     instance: InstanceId | None = None, ordinal: int | None = None,
                     vid: str | None = None) -> str:
    """Add one work-item vertex with its message edges.

    Inputs are born persisted and consume nothing; tasks consume exactly one
    message; steps consume at least one and gain a successor edge from the
    latest non-aborted vertex of the previous ordinal.
    """
    if kind == INPUT:
        if consumed:
            raise MessageAlreadyConsumed("input vertices consume nothing")
        progress = PERSISTED
        vid = vid or _fresh_vid(graph, "i")
    elif kind == TASK:
        if len(consumed) != 1:
            raise UnknownMessage("a task consumes exactly one message")
        if task_name is None:
            raise ValueError("task vertices need task_name")
        progress = IN_PROGRESS
        vid = vid or _fresh_vid(graph, "t")
    elif kind == STEP:
        if not consumed:
            raise UnknownMessage("a step consumes at least one message")
        if instance is None or ordinal is None or ordinal < 1:
            raise ValueError("step vertices need instance and 1-based ordinal")
        progress = IN_PROGRESS
        vid = vid or _fresh_vid(graph, "s")
    else:
        raise ValueError(f"unknown vertex kind {kind!r}")

    if vid in graph.vertices:
        raise UnknownVertex(f"vertex id {vid} already present")

    producers: list[str] = []
    for m in consumed:
        for c in graph._consumers.get(m, ()):  # at most one live consumer per message
            if graph.vertices[c].progress != ABORTED:
                raise MessageAlreadyConsumed(f"message {m} already consumed by {c}")
        producers.append(_latest_live_producer(graph, m))

    prev_vid: str | None = None
    if kind == STEP and ordinal is not None and ordinal > 1:
        assert instance is not None
        candidates = graph._steps_at.get((instance.skey, ordinal - 1), [])
        if not candidates:
            raise UnknownVertex(
                f"no step with ordinal {ordinal - 1} for instance {instance.skey}")
        # Prefer the live attempt; if every attempt is aborted, chain to the
        # newest one anyway. That happens when a partition keeps speculating
        # on a prefix the recorder already knows is doomed (the crash that
        # killed the prefix's inputs has not reached it yet); the new vertex
        # is then dead on arrival and the caller must abort it.
        prev_vid = candidates[-1]
        for c in reversed(candidates):
            if graph.vertices[c].progress != ABORTED:
                prev_vid = c
                break

    v = ExecutionVertex(vid=vid, kind=kind, progress=progress, consumed=list(consumed),
                        task_name=task_name, instance=instance, ordinal=ordinal)
    graph.vertices[vid] = v
    for m, p in zip(consumed, producers):
        graph.msg_edges.append((p, vid, m))
        graph._consumers.setdefault(m, []).append(vid)
    if prev_vid is not None:
        graph.succ_edges.append((prev_vid, vid))
    graph._deps[vid] = producers + ([prev_vid] if prev_vid is not None else [])
    if kind == STEP:
        assert instance is not None and ordinal is not None
        graph._steps_at.setdefault((instance.skey, ordinal), []).append(vid)
    if produced:
        _register_produced(graph, vid, produced)
    return vid


def born_doomed(graph: ExecutionGraph, vid: str) -> bool:
    """True when a freshly recorded vertex is already causally dead.

    It was linked to an aborted producer or an aborted predecessor attempt:
    work stacked on a phantom prefix whose rewind is inevitable, even though
    the executing partition has not heard about the crash yet.
    """
    return any(graph.vertices[d].progress == ABORTED for d in graph._deps.get(vid, ()))


def add_produced(graph: ExecutionGraph, vid: str, msgids: list[str]) -> None:
    """Attach produced messages to a vertex once they are known (at completion)."""
    graph.vertex(vid)
    _register_produced(graph, vid, msgids)


def advance_progress(graph: ExecutionGraph, vid: str, to: str) -> ExecutionGraph:
    v = graph.vertex(vid)
    if to not in PROGRESS_STATES:
        raise IllegalTransition(f"unknown progress state {to!r}")
    if to not in LEGAL_TRANSITIONS[v.progress]:
        raise IllegalTransition(f"{vid}: {v.progress} -> {to}")
    v.progress = to
    return graph


def _out_neighbors(graph: ExecutionGraph) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {vid: [] for vid in graph.vertices}
    for p, c, _m in graph.msg_edges:
        adj[p].append(c)
    for a, b in graph.succ_edges:
        adj[a].append(b)
    return adj


def abort_closure(graph: ExecutionGraph, vid: str) -> set[str]:
    """All non-persisted vertices causally downstream of vid, inclusive.

    A persisted vertex reachable from vid would mean durable state depends
    on work about to be thrown away; that is a protocol bug, not a valid
    closure, so it raises.
    """
    start = graph.vertex(vid)
    if start.progress == PERSISTED:
        raise PersistedDependsOnAborted(f"cannot abort persisted vertex {vid}")
    adj = _out_neighbors(graph)
    seen: set[str] = set()
    stack = [vid]
    while stack:
        cur = stack.pop()
        if cur in seen:
            continue
        if graph.vertices[cur].progress == PERSISTED:
            raise PersistedDependsOnAborted(
                f"persisted vertex {cur} causally depends on aborted {vid}")
        seen.add(cur)
        stack.extend(adj[cur])
    return seen


LEVELS: dict[str, tuple[str, ...]] = {
    "P": (PERSISTED,),
    "PC": (PERSISTED, COMPLETED),
    "PCI": (PERSISTED, COMPLETED, IN_PROGRESS),
}


def _check_level(graph: ExecutionGraph, level: str, out: list[str]) -> None:
    states = LEVELS[level]
    member = {vid for vid, v in graph.vertices.items() if v.progress in states}

    # Edge well-formedness: every consumption by a member must be satisfied
    # by a member producer. An edge into the level from outside means this
    # snapshot could never have happened in a failure-free run.
    satisfied: set[tuple[str, str]] = set()
    outside: dict[tuple[str, str], str] = {}
    for p, c, m in graph.msg_edges:
        if c in member:
            if p in member:
                satisfied.add((c, m))
            else:
                outside[(c, m)] = p
    for vid in sorted(member):
        v = graph.vertices[vid]
        for m in v.consumed:
            if (vid, m) in satisfied:
                continue
            p = outside.get((vid, m))
            if p is not None:
                out.append(f"level-{level}: {vid} consumes {m} produced outside the level by {p}")
            else:
                out.append(f"level-{level}: {vid} has no producer edge for {m}")
        if v.kind == TASK and v.progress in (COMPLETED, PERSISTED) and len(v.produced) != 1:
            out.append(f"level-{level}: task {vid} produced {len(v.produced)} messages, wants 1")

    # Single consumption within the level.
    consumers_in: dict[str, list[str]] = {}
    for p, c, m in graph.msg_edges:
        if c in member:
            consumers_in.setdefault(m, []).append(c)
    for m in sorted(consumers_in):
        cs = sorted(set(consumers_in[m]))
        if len(cs) > 1:
            out.append(f"level-{level}: message {m} consumed by {len(cs)} vertices: {cs}")

    # Step ordinals per instance: unique, contiguous from 1, chained.
    by_instance: dict[str, dict[int, str]] = {}
    for vid in sorted(member):
        v = graph.vertices[vid]
        if v.kind != STEP:
            continue
        assert v.instance is not None and v.ordinal is not None
        slot = by_instance.setdefault(v.instance.skey, {})
        if v.ordinal in slot:
            out.append(f"level-{level}: instance {v.instance.skey} has duplicate "
                       f"ordinal {v.ordinal}: {slot[v.ordinal]}, {vid}")
        else:
            slot[v.ordinal] = vid
    succ = {(a, b) for a, b in graph.succ_edges}
    for skey in sorted(by_instance):
        slot = by_instance[skey]
        ordinals = sorted(slot)
        for i, o in enumerate(ordinals, start=1):
            if o != i:
                out.append(f"level-{level}: instance {skey} ordinals not contiguous: {ordinals}")
                break
        for o in ordinals:
            if o + 1 in slot and (slot[o], slot[o + 1]) not in succ:
                out.append(f"level-{level}: missing successor edge {slot[o]} -> {slot[o + 1]}")

    # Acyclicity of the induced subgraph.
    adj: dict[str, list[str]] = {vid: [] for vid in member}
    for p, c, _m in graph.msg_edges:
        if p in member and c in member:
            adj[p].append(c)
    for a, b in graph.succ_edges:
        if a in member and b in member:
            adj[a].append(b)
    state: dict[str, int] = {}

    def cyclic(start: str) -> bool:
        stack: list[tuple[str, int]] = [(start, 0)]
        state[start] = 1
        while stack:
            node, idx = stack[-1]
            if idx < len(adj[node]):
                stack[-1] = (node, idx + 1)
                nxt = adj[node][idx]
                st = state.get(nxt, 0)
                if st == 1:
                    return True
                if st == 0:
                    state[nxt] = 1
                    stack.append((nxt, 0))
            else:
                state[node] = 2
                stack.pop()
        return False

    for vid in sorted(member):
        if state.get(vid, 0) == 0 and cyclic(vid):
            out.append(f"level-{level}: cycle detected through {vid}")
            break


def check_consistency(graph: ExecutionGraph, levels: tuple[str, ...] = ("P", "PC", "PCI")) -> Report:
    """Verify each requested progress level describes a failure-free execution."""
    out: list[str] = []
    for level in levels:
        if level not in LEVELS:
            raise ValueError(f"unknown level {level!r}")
        _check_level(graph, level, out)
    return Report(out)


def check_ccc_properties(graph: ExecutionGraph) -> Report:
    """The four commit bullets; bullet 4 only when the graph is complete."""
    out: list[str] = []
    preds: dict[str, list[tuple[str, str]]] = {vid: [] for vid in graph.vertices}
    for p, c, m in graph.msg_edges:
        preds[c].append((p, f"message {m}"))
    for a, b in graph.succ_edges:
        preds[b].append((a, "successor"))

    for vid in sorted(graph.vertices):
        v = graph.vertices[vid]
        if v.progress == PERSISTED:
            for p, why in preds[vid]:
                if graph.vertices[p].progress != PERSISTED:
                    out.append(f"bullet-1: persisted {vid} depends on "
                               f"{graph.vertices[p].progress} {p} via {why}")
        if v.progress != ABORTED:
            for p, why in preds[vid]:
                if graph.vertices[p].progress == ABORTED:
                    out.append(f"bullet-2: non-aborted {vid} depends on aborted {p} via {why}")

    live_consumers: dict[str, list[str]] = {}
    for p, c, m in graph.msg_edges:
        if graph.vertices[c].progress != ABORTED:
            live_consumers.setdefault(m, []).append(c)
    for m in sorted(live_consumers):
        cs = sorted(set(live_consumers[m]))
        if len(cs) > 1:
            out.append(f"bullet-3: message {m} consumed by {len(cs)} non-aborted vertices: {cs}")

    if graph.complete:
        for m in sorted(graph._producers):
            alive = any(graph.vertices[p].progress != ABORTED for p in graph._producers[m])
            if not alive:
                continue
            n = len(set(live_consumers.get(m, ())))
            if n != 1:
                out.append(f"bullet-4: live message {m} has {n} non-aborted consumers, wants 1")
    return Report(out)


# --- trace file format --------------------------------------------------------
# Line-based, whitespace-separated:
#   V <vid> <kind> <progress>
#   E msg <producer> <consumer> <msgid>
#   E succ <from> <to>
#   COMPLETE true|false
# Kinds: input | task:<name> | step:<instance-name>:<instance-key>:<ordinal>,
# with name/key percent-quoted so tokens stay whitespace-free.

def _kind_token(v: ExecutionVertex) -> str:
    if v.kind == INPUT:
        return "input"
    if v.kind == TASK:
        return f"task:{qtoken(v.task_name or '')}"
    assert v.instance is not None
    return f"step:{qtoken(v.instance.name)}:{qtoken(v.instance.key)}:{v.ordinal}"


def trace_lines(graph: ExecutionGraph) -> list[str]:
    lines: list[str] = []
    for vid in graph.vertices:  # creation order
        v = graph.vertices[vid]
        lines.append(f"V {vid} {_kind_token(v)} {v.progress}")
    for p, c, m in graph.msg_edges:
        lines.append(f"E msg {p} {c} {m}")
    for a, b in graph.succ_edges:
        lines.append(f"E succ {a} {b}")
    lines.append(f"COMPLETE {'true' if graph.complete else 'false'}")
    return lines


def write_trace(graph: ExecutionGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(trace_lines(graph)) + "\n")


def parse_trace(lines: list[str] | str) -> ExecutionGraph:
    """Rebuild a graph from its trace. Raises TraceFormatError with the line number."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    graph = new_graph()
    consumed_by: dict[str, list[str]] = {}
    produced_by: dict[str, list[str]] = {}
    saw_complete = False

    def fail(lineno: int, why: str) -> None:
        raise TraceFormatError(f"line {lineno}: {why}")

    # First pass: vertices and completeness; edges collected then replayed.
    edges: list[tuple[int, list[str]]] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "V":
            if len(parts) != 4:
                fail(lineno, f"V line wants 4 fields, got {len(parts)}")
            vid, kind_tok, progress = parts[1], parts[2], parts[3]
            if progress not in PROGRESS_STATES:
                fail(lineno, f"unknown progress {progress!r}")
            if vid in graph.vertices:
                fail(lineno, f"duplicate vertex {vid}")
            if kind_tok == "input":
                v = ExecutionVertex(vid, INPUT, progress)
            elif kind_tok.startswith("task:"):
                v = ExecutionVertex(vid, TASK, progress, task_name=unqtoken(kind_tok[5:]))
            elif kind_tok.startswith("step:"):
                bits = kind_tok.split(":")
                if len(bits) != 4:
                    fail(lineno, f"bad step kind {kind_tok!r}")
                try:
                    ordinal = int(bits[3])
                except ValueError:
                    fail(lineno, f"bad ordinal {bits[3]!r}")
                    raise
                v = ExecutionVertex(vid, STEP, progress,
                                    instance=InstanceId(unqtoken(bits[1]), unqtoken(bits[2])),
                                    ordinal=ordinal)
            else:
                fail(lineno, f"unknown kind {kind_tok!r}")
                raise AssertionError
            graph.vertices[vid] = v
        elif parts[0] == "E":
            edges.append((lineno, parts))
        elif parts[0] == "COMPLETE":
            if len(parts) != 2 or parts[1] not in ("true", "false"):
                fail(lineno, "COMPLETE wants true|false")
            graph.complete = parts[1] == "true"
            saw_complete = True
        else:
            fail(lineno, f"unknown record {parts[0]!r}")

    for lineno, parts in edges:
        if parts[1] == "msg":
            if len(parts) != 5:
                fail(lineno, "E msg wants 5 fields")
            p, c, m = parts[2], parts[3], parts[4]
            for vid in (p, c):
                if vid not in graph.vertices:
                    fail(lineno, f"edge references unknown vertex {vid}")
            graph.msg_edges.append((p, c, m))
            graph._consumers.setdefault(m, []).append(c)
            consumed_by.setdefault(c, []).append(m)
            if p not in produced_by.setdefault(m, []):
                produced_by[m].append(p)
        elif parts[1] == "succ":
            if len(parts) != 4:
                fail(lineno, "E succ wants 4 fields")
            a, b = parts[2], parts[3]
            for vid in (a, b):
                if vid not in graph.vertices:
                    fail(lineno, f"edge references unknown vertex {vid}")
            graph.succ_edges.append((a, b))
        else:
            fail(lineno, f"unknown edge kind {parts[1]!r}")

    if not saw_complete:
        raise TraceFormatError("missing COMPLETE line")

    for vid, v in graph.vertices.items():
        v.consumed = consumed_by.get(vid, [])
    for m in produced_by:
        graph._producers[m] = produced_by[m]
        for p in produced_by[m]:
            graph.vertices[p].produced.append(m)
    for v in graph.vertices.values():
        if v.kind == STEP:
            assert v.instance is not None and v.ordinal is not None
            graph._steps_at.setdefault((v.instance.skey, v.ordinal), []).append(v.vid)
    return graph
