"""Execution-graph model: progress automaton, closure, level checks, trace io."""
from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duraflow import model as m
from duraflow.errors import (IllegalTransition, MessageAlreadyConsumed,
                             PersistedDependsOnAborted, TraceFormatError, UnknownMessage)
from duraflow.messages import InstanceId


def seq_graph(n_tasks: int = 2) -> tuple[m.ExecutionGraph, list[str]]:
    """Input -> step1 -> task1 -> step2 -> ... -> step(n+1); all completed."""
    g = m.new_graph()
    inst = InstanceId("Seq", "r1")
    vids = [m.record_work_item(g, m.INPUT, [], ["m0"])]
    prev_msg = "m0"
    for i in range(1, n_tasks + 1):
        s = m.record_work_item(g, m.STEP, [prev_msg], [f"tm{i}"], instance=inst, ordinal=i)
        m.advance_progress(g, s, m.COMPLETED)
        t = m.record_work_item(g, m.TASK, [f"tm{i}"], [f"rm{i}"], task_name=f"F{i}")
        m.advance_progress(g, t, m.COMPLETED)
        vids.extend([s, t])
        prev_msg = f"rm{i}"
    s = m.record_work_item(g, m.STEP, [prev_msg], [], instance=inst, ordinal=n_tasks + 1)
    m.advance_progress(g, s, m.COMPLETED)
    vids.append(s)
    return g, vids


def test_sequence_graph_shape():
    g, vids = seq_graph(2)
    assert len(g.vertices) == 6
    assert len(g.msg_edges) == 5
    assert len(g.succ_edges) == 2
    assert g.vertices[vids[0]].progress == m.PERSISTED  # inputs born persisted


def test_progress_legal_path_and_terminals():
    g, vids = seq_graph(1)
    s1 = vids[1]
    m.advance_progress(g, s1, m.PERSISTED)
    with pytest.raises(IllegalTransition):
        m.advance_progress(g, s1, m.ABORTED)  # persisted is terminal
    t1 = vids[2]
    m.advance_progress(g, t1, m.ABORTED)
    with pytest.raises(IllegalTransition):
        m.advance_progress(g, t1, m.COMPLETED)  # aborted is terminal


@given(st.lists(st.sampled_from(m.PROGRESS_STATES), max_size=6))
@settings(max_examples=60, deadline=None)
def test_progress_automaton_never_leaves_legal_states(path):
    g = m.new_graph()
    m.record_work_item(g, m.INPUT, [], ["m0"])
    s = m.record_work_item(g, m.STEP, ["m0"], [], instance=InstanceId("A", "k"), ordinal=1)
    state = m.IN_PROGRESS
    for target in path:
        if target in m.LEGAL_TRANSITIONS[state]:
            m.advance_progress(g, s, target)
            state = target
        else:
            with pytest.raises(IllegalTransition):
                m.advance_progress(g, s, target)
        assert g.vertices[s].progress == state


def test_double_consumption_rejected_until_consumer_aborts():
    g = m.new_graph()
    m.record_work_item(g, m.INPUT, [], ["m0"])
    inst = InstanceId("A", "k")
    s1 = m.record_work_item(g, m.STEP, ["m0"], [], instance=inst, ordinal=1)
    with pytest.raises(MessageAlreadyConsumed):
        m.record_work_item(g, m.STEP, ["m0"], [], instance=InstanceId("B", "k"), ordinal=1)
    m.advance_progress(g, s1, m.ABORTED)
    # once the first consumer aborted, a retry may consume the same message
    s2 = m.record_work_item(g, m.STEP, ["m0"], [], instance=inst, ordinal=1)
    assert g.vertices[s2].progress == m.IN_PROGRESS


def test_unknown_message_rejected():
    g = m.new_graph()
    with pytest.raises(UnknownMessage):
        m.record_work_item(g, m.STEP, ["nope"], [], instance=InstanceId("A", "k"), ordinal=1)


def bfs_closure_oracle(g: m.ExecutionGraph, start: str) -> set[str]:
    """Independent reachability: repeated full-edge scans until fixpoint."""
    reach = {start}
    changed = True
    while changed:
        changed = False
        for p, c, _msg in g.msg_edges:
            if p in reach and c not in reach:
                reach.add(c)
                changed = True
        for a, b in g.succ_edges:
            if a in reach and b not in reach:
                reach.add(b)
                changed = True
    return reach


def test_abort_closure_mid_sequence():
    # Abort the second step of a 3-step sequence: the downstream task and
    # final step fall with it, the persisted prefix stays out.
    g, vids = seq_graph(2)
    _inp, s1, t1, s2, t2, s3 = vids
    for v in (s1, t1):
        m.advance_progress(g, v, m.PERSISTED)
    closure = m.abort_closure(g, s2)
    assert closure == {s2, t2, s3}
    assert closure == bfs_closure_oracle(g, s2)


def test_abort_closure_rejects_reachable_persisted():
    g, vids = seq_graph(2)
    m.advance_progress(g, vids[5], m.PERSISTED)  # final step persisted
    with pytest.raises(PersistedDependsOnAborted):
        m.abort_closure(g, vids[3])  # aborting step2 would strand it


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=40, deadline=None)
def test_abort_closure_matches_oracle_on_random_graphs(seed):
    g, live = random_protocol_graph(seed)
    rng = random.Random(seed ^ 0x5EED)
    candidates = [vid for vid, v in g.vertices.items() if v.progress != m.PERSISTED]
    if not candidates:
        return
    start = rng.choice(sorted(candidates))
    oracle = bfs_closure_oracle(g, start)
    if any(g.vertices[v].progress == m.PERSISTED for v in oracle):
        with pytest.raises(PersistedDependsOnAborted):
            m.abort_closure(g, start)
    else:
        assert m.abort_closure(g, start) == oracle


def random_protocol_graph(seed: int) -> tuple[m.ExecutionGraph, list[str]]:
    """Build a graph through the legal protocol only.

    Random interleaving of: new input, start step/task on an unconsumed
    message, complete, persist (only when all dependencies persisted),
    abort (whole closure). The result must satisfy every commit bullet.
    """
    rng = random.Random(seed)
    g = m.new_graph()
    unconsumed: list[str] = []
    open_vertices: list[str] = []  # in_progress
    completed: list[str] = []
    next_msg = 0
    ordinals: dict[str, int] = {}
    busy: set[str] = set()  # instances with an in-flight step; one at a time

    def preds(vid: str) -> list[str]:
        out = [p for p, c, _msg in g.msg_edges if c == vid]
        out += [a for a, b in g.succ_edges if b == vid]
        return out

    for _ in range(rng.randrange(10, 40)):
        op = rng.random()
        if op < 0.25 or not (unconsumed or open_vertices or completed):
            mid = f"m{next_msg}"
            next_msg += 1
            m.record_work_item(g, m.INPUT, [], [mid])
            unconsumed.append(mid)
        elif op < 0.55 and unconsumed:
            mid = unconsumed.pop(rng.randrange(len(unconsumed)))
            ik = f"I{rng.randrange(4)}"
            if rng.random() < 0.5 or ik in busy:
                vid = m.record_work_item(g, m.TASK, [mid], task_name="F")
            else:
                ordinals[ik] = ordinals.get(ik, 0) + 1
                vid = m.record_work_item(g, m.STEP, [mid], instance=InstanceId("W", ik),
                                         ordinal=ordinals[ik])
                busy.add(ik)
            open_vertices.append(vid)
        elif op < 0.75 and open_vertices:
            vid = open_vertices.pop(rng.randrange(len(open_vertices)))
            mid = f"m{next_msg}"
            next_msg += 1
            m.advance_progress(g, vid, m.COMPLETED)
            m.add_produced(g, vid, [mid])
            unconsumed.append(mid)
            completed.append(vid)
            v = g.vertices[vid]
            if v.kind == m.STEP:
                assert v.instance is not None
                busy.discard(v.instance.key)
        elif op < 0.9 and completed:
            vid = rng.choice(completed)
            if all(g.vertices[p].progress == m.PERSISTED for p in preds(vid)):
                m.advance_progress(g, vid, m.PERSISTED)
                completed.remove(vid)
        elif open_vertices or completed:
            pool = open_vertices + completed
            vid = rng.choice(pool)
            for dead in m.abort_closure(g, vid):
                v = g.vertices[dead]
                if v.progress != m.ABORTED:
                    m.advance_progress(g, dead, m.ABORTED)
                if dead in open_vertices:
                    open_vertices.remove(dead)
                    if v.kind == m.STEP:
                        assert v.instance is not None
                        busy.discard(v.instance.key)
                if dead in completed:
                    completed.remove(dead)
                # abort retracts not-yet-consumed output, as a rewind would
                for msg in v.produced:
                    if msg in unconsumed and not any(
                            g.vertices[p].progress != m.ABORTED for p in g._producers[msg]):
                        unconsumed.remove(msg)
                # and rolls the instance's step lineage back
                if v.kind == m.STEP:
                    assert v.instance is not None
                    ik = v.instance.key
                    ordinals[ik] = max((w.ordinal for w in g.vertices.values()
                                        if w.kind == m.STEP and w.instance == v.instance
                                        and w.progress != m.ABORTED and w.ordinal is not None),
                                       default=0)
    return g, open_vertices + completed


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=40, deadline=None)
def test_protocol_graphs_nest_across_levels(seed):
    # A graph built through the legal protocol passes all three levels and
    # bullets 1-3; level nesting comes for free from bullets 1-2.
    g, _ = random_protocol_graph(seed)
    assert m.check_ccc_properties(g).violations == []
    assert m.check_consistency(g).violations == []


def test_level_p_catches_persisted_consuming_completed():
    g = m.new_graph()
    m.record_work_item(g, m.INPUT, [], ["m0"])
    inst = InstanceId("A", "k")
    s1 = m.record_work_item(g, m.STEP, ["m0"], ["m1"], instance=inst, ordinal=1)
    m.advance_progress(g, s1, m.COMPLETED)
    t1 = m.record_work_item(g, m.TASK, ["m1"], ["m2"], task_name="F")
    m.advance_progress(g, t1, m.COMPLETED)
    s2 = m.record_work_item(g, m.STEP, ["m2"], [], instance=inst, ordinal=2)
    m.advance_progress(g, s2, m.COMPLETED)
    # Force the illegal state by hand: step2 persisted while its inputs are not.
    g.vertices[s2].progress = m.PERSISTED
    rep = m.check_consistency(g, levels=("P",))
    assert any("level-P" in v for v in rep.violations)
    ccc = m.check_ccc_properties(g)
    assert any(v.startswith("bullet-1") for v in ccc.violations)


def test_bullet2_flags_survivor_of_aborted_producer():
    g = m.new_graph()
    m.record_work_item(g, m.INPUT, [], ["m0"])
    inst = InstanceId("A", "k")
    s1 = m.record_work_item(g, m.STEP, ["m0"], ["m1"], instance=inst, ordinal=1)
    m.advance_progress(g, s1, m.COMPLETED)
    t1 = m.record_work_item(g, m.TASK, ["m1"], ["m2"], task_name="F")
    m.advance_progress(g, t1, m.COMPLETED)
    g.vertices[s1].progress = m.ABORTED  # bypass closure on purpose
    ccc = m.check_ccc_properties(g)
    assert any(v.startswith("bullet-2") for v in ccc.violations)


def test_bullet3_on_double_live_consumption():
    g = m.new_graph()
    m.record_work_item(g, m.INPUT, [], ["m0"])
    s1 = m.record_work_item(g, m.STEP, ["m0"], [], instance=InstanceId("A", "k"), ordinal=1)
    m.advance_progress(g, s1, m.ABORTED)
    s2 = m.record_work_item(g, m.STEP, ["m0"], [], instance=InstanceId("A", "k"), ordinal=1)
    # resurrect the aborted consumer by hand to fake a double consumption
    g.vertices[s1].progress = m.IN_PROGRESS
    ccc = m.check_ccc_properties(g)
    assert any(v.startswith("bullet-3") for v in ccc.violations)


def test_bullet4_complete_needs_every_live_message_consumed():
    g, vids = seq_graph(1)
    g.complete = True
    assert m.check_ccc_properties(g).ok
    # a live message nobody consumes fails completeness
    m.add_produced(g, vids[-1], ["dangling"])
    ccc = m.check_ccc_properties(g)
    assert any(v.startswith("bullet-4") for v in ccc.violations)


def test_bullet4_ignores_messages_from_aborted_producers():
    g, vids = seq_graph(1)
    _inp, s1, t1, s2 = vids
    # a separate aborted branch whose output dangles
    extra = m.record_work_item(g, m.INPUT, [], ["mx"])
    sx = m.record_work_item(g, m.STEP, ["mx"], ["my"], instance=InstanceId("X", "k"), ordinal=1)
    m.advance_progress(g, sx, m.COMPLETED)
    m.advance_progress(g, sx, m.ABORTED)
    sx2 = m.record_work_item(g, m.STEP, ["mx"], [], instance=InstanceId("X", "k"), ordinal=1)
    m.advance_progress(g, sx2, m.COMPLETED)
    g.complete = True
    assert m.check_ccc_properties(g).ok, m.check_ccc_properties(g).violations


def test_reexecution_reuses_ordinal_and_passes_checks():
    # step2 aborted, step2' re-executes with the same ordinal: levels exclude
    # the aborted attempt so contiguity still holds.
    g = m.new_graph()
    inst = InstanceId("A", "k")
    m.record_work_item(g, m.INPUT, [], ["m0"])
    s1 = m.record_work_item(g, m.STEP, ["m0"], ["m1"], instance=inst, ordinal=1)
    m.advance_progress(g, s1, m.COMPLETED)
    m.advance_progress(g, s1, m.PERSISTED)
    t1 = m.record_work_item(g, m.TASK, ["m1"], ["m2"], task_name="F")
    m.advance_progress(g, t1, m.COMPLETED)
    m.advance_progress(g, t1, m.PERSISTED)
    s2 = m.record_work_item(g, m.STEP, ["m2"], [], instance=inst, ordinal=2)
    m.advance_progress(g, s2, m.ABORTED)
    s2b = m.record_work_item(g, m.STEP, ["m2"], [], instance=inst, ordinal=2)
    m.advance_progress(g, s2b, m.COMPLETED)
    assert m.check_consistency(g).ok
    assert m.check_ccc_properties(g).ok


def test_trace_roundtrip_preserves_checks():
    g, vids = seq_graph(3)
    m.advance_progress(g, vids[1], m.PERSISTED)
    g.complete = False
    lines = m.trace_lines(g)
    g2 = m.parse_trace(lines)
    assert m.trace_lines(g2) == lines
    assert m.check_consistency(g2).violations == m.check_consistency(g).violations
    assert m.check_ccc_properties(g2).violations == m.check_ccc_properties(g).violations


def test_trace_quotes_awkward_names():
    g = m.new_graph()
    m.record_work_item(g, m.INPUT, [], ["m0"])
    inst = InstanceId("My Flow", "key with spaces")
    s = m.record_work_item(g, m.STEP, ["m0"], [], instance=inst, ordinal=1)
    lines = m.trace_lines(g)
    assert all(len(line.split()) == len(line.split(" ")) for line in lines)
    g2 = m.parse_trace(lines)
    assert g2.vertices[s].instance == inst


@pytest.mark.parametrize("bad,why", [
    ("V v1 input", "field count"),
    ("V v1 wat persisted", "kind"),
    ("V v1 input flying", "progress"),
    ("E msg a b m0", "unknown vertex"),
    ("Q hm", "record"),
])
def test_trace_parse_errors(bad, why):
    with pytest.raises(TraceFormatError):
        m.parse_trace([bad, "COMPLETE true"])


def test_trace_requires_complete_line():
    with pytest.raises(TraceFormatError):
        m.parse_trace(["V v1 input persisted"])
