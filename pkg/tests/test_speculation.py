"""Tag lifecycle: confirms, the flush barrier, and rewind adjudication."""
from __future__ import annotations

from hypothesis import given, settings
from hypothesis import strategies as st

from duraflow.messages import SpeculationTag
from duraflow.speculation import (SpeculationManager, ack_payload, confirm_payload,
                                  control_kind, recovery_payload)
from duraflow.messages import InstanceId, Message


def mgr(source="p0", epoch=1) -> SpeculationManager:
    return SpeculationManager(source, (epoch, 0))


def tag(source="p1", inc=(1, 0), origin=0) -> SpeculationTag:
    return SpeculationTag(source, inc, origin)


# --- sender side -----------------------------------------------------------------

def test_confirms_cover_exactly_the_flushed_origins():
    m = mgr()
    m.note_tagged_send("p1", 7)
    m.note_tagged_send("p1", 9)
    m.note_tagged_send("p2", 9)

    due = m.confirms_due(flushed=8)
    assert due == [("p1", confirm_payload("p0", (1, 0), 8))]
    assert m.outstanding == {"p1": [9], "p2": [9]}

    due = m.confirms_due(flushed=9)
    assert [t for t, _ in due] == ["p1", "p2"]
    assert m.outstanding == {"p1": [], "p2": []}
    assert m.confirms_due(flushed=20) == []  # nothing outstanding, nothing owed


def test_rewind_drops_outstanding_sends_above_the_cut():
    m = mgr()
    m.note_tagged_send("p1", 7)
    m.note_tagged_send("p1", 12)
    notice = m.on_rewind(10)
    assert notice == recovery_payload("p0", (1, 1), 10)
    assert m.incarnation == (1, 1)
    assert m.outstanding == {"p1": [7]}


# --- receiver side -----------------------------------------------------------------

def test_barrier_sits_below_the_earliest_anchor():
    m = mgr()
    assert m.barrier(20) == 20
    m.register_anchor(tag("p1", (1, 0), origin=7), admit_logpos=12)
    m.register_anchor(tag("p2", (1, 0), origin=3), admit_logpos=15)
    assert m.barrier(20) == 11
    assert m.apply_floor("p1", (1, 0), flushed=7)
    assert m.barrier(20) == 14
    assert m.apply_floor("p2", (1, 0), flushed=3)
    assert m.barrier(20) == 20


def test_floor_confirms_older_incarnations_but_not_higher_origins():
    m = mgr()
    m.register_anchor(tag("p1", (1, 0), origin=20), admit_logpos=5)
    m.register_anchor(tag("p1", (1, 0), origin=33), admit_logpos=8)
    # confirm from a newer incarnation covers surviving older-incarnation tags
    assert m.apply_floor("p1", (1, 1), flushed=25)
    assert [a.origin for a in m.anchors["p1"]] == [33]
    assert m.barrier(50) == 7


def test_recovery_notice_keeps_survivors_anchored_and_rewinds_phantoms():
    m = mgr()
    m.register_anchor(tag("p2", (1, 0), origin=5), admit_logpos=30)
    m.register_anchor(tag("p2", (1, 0), origin=12), admit_logpos=33)
    rewind_to = m.on_recovery_notice("p2", (2, 0), recovered=11)
    # origin 12 died in the rewind: phantom, so we must cut below its anchor.
    assert rewind_to == 32
    # origin 5 survived it, but surviving a rewind is not durability: a later,
    # deeper rewind could still destroy it, so its anchor must stay up.
    assert [a.origin for a in m.anchors["p2"]] == [5]
    assert m.barrier(50) == 29
    # only an actual durability announcement lets it go
    assert m.apply_floor("p2", (2, 0), flushed=5)
    assert "p2" not in m.anchors


def test_double_rewind_at_source_rolls_back_survivors_of_the_first():
    # the source rewinds to 30 (our origin-27 record survives), then crashes
    # or rewinds again to 20 (now it is gone); only the kept anchor lets the
    # second notice reach us
    m = mgr()
    m.register_anchor(tag("p2", (1, 0), origin=27), admit_logpos=18)
    assert m.on_recovery_notice("p2", (1, 1), recovered=30) is None
    assert m.barrier(50) == 17
    assert m.on_recovery_notice("p2", (1, 2), recovered=20) == 17


def test_duplicate_or_stale_notice_is_ignored():
    m = mgr()
    m.register_anchor(tag("p2", (2, 0), origin=12), admit_logpos=33)
    assert m.on_recovery_notice("p2", (2, 0), recovered=11) is None  # not newer
    assert m.on_recovery_notice("p2", (1, 5), recovered=0) is None   # older epoch
    assert [a.origin for a in m.anchors["p2"]] == [12]


def test_notice_keeps_new_incarnation_anchors_above_the_cut():
    m = mgr()
    m.register_anchor(tag("p2", (2, 0), origin=15), admit_logpos=40)
    rewind_to = m.on_recovery_notice("p2", (2, 0), recovered=11)
    assert rewind_to is None  # same incarnation: record still pending, not phantom
    assert [a.origin for a in m.anchors["p2"]] == [15]


def test_stale_and_confirmed_tags_at_read_time():
    m = mgr()
    assert m.on_recovery_notice("p2", (2, 0), recovered=11) is None
    assert m.is_stale(tag("p2", (1, 0), origin=12))       # rolled back
    assert not m.is_stale(tag("p2", (1, 0), origin=8))    # survived the rewind
    # surviving is not durability: the tag still needs an anchor until a confirm
    assert m.needs_anchor(tag("p2", (1, 0), origin=8))
    assert m.apply_floor("p2", (2, 0), flushed=9) is False  # nothing anchored yet
    assert not m.needs_anchor(tag("p2", (1, 0), origin=8))  # now actually durable
    assert not m.is_stale(tag("p2", (2, 0), origin=15))   # current incarnation
    assert m.needs_anchor(tag("p2", (2, 0), origin=15))
    assert m.needs_anchor(tag("p3", (1, 0), origin=2))    # unknown source: anchor it


def test_own_rewind_drops_anchors_above_the_cut_and_bumps_incarnation():
    m = mgr()
    m.register_anchor(tag("p1", (1, 0), origin=7), admit_logpos=12)
    m.register_anchor(tag("p2", (1, 0), origin=9), admit_logpos=18)
    notice = m.on_rewind(15)
    assert notice["recovery"]["inc"] == [1, 1]
    assert "p2" not in m.anchors and [a.logpos for a in m.anchors["p1"]] == [12]


def test_control_kind_dispatch():
    inst = InstanceId("_ctl", "x")
    assert control_kind(Message("m", inst, confirm_payload("p0", (1, 0), 5))) == "confirm"
    assert control_kind(Message("m", inst, recovery_payload("p0", (1, 0), 5))) == "recovery"
    assert control_kind(Message("m", inst, ack_payload("p0", 5))) == "ack"
    assert control_kind(Message("m", inst, {"start": {}})) is None
    assert control_kind(Message("m", inst, 42)) is None


# --- cascade arithmetic -------------------------------------------------------------

@given(st.lists(st.tuples(st.integers(0, 50), st.integers(1, 60)), min_size=1, max_size=8))
@settings(max_examples=80, deadline=None)
def test_rewind_position_is_strictly_below_every_phantom_anchor(pairs):
    # pairs of (origin above recovered, admit logpos)
    m = mgr()
    recovered = 10
    admits = []
    for origin_above, logpos in pairs:
        m.register_anchor(tag("p1", (1, 0), origin=recovered + 1 + origin_above), logpos)
        admits.append(logpos)
    rewind_to = m.on_recovery_notice("p1", (2, 0), recovered=recovered)
    assert rewind_to == min(admits) - 1
    assert rewind_to < min(admits)
