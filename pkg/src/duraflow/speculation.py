"""Speculation bookkeeping: tags, confirms, anchors, and rewind directives.

Only the globally-speculating mode sends messages whose producing record is
not yet durable. Such a message carries a tag (source partition, sender
incarnation, origin log position). The receiver admits it but registers an
anchor at the admitting record's position, and its flusher refuses to flush
at or past the earliest anchor: durable state never depends on a peer's
unflushed record. That single barrier is what makes "persisted" coincide
with "flushed" everywhere else in the engine.

Two kinds of announcement drive the bookkeeping, and they are not
interchangeable:

* a confirm (or the flushed-floor piggybacked on any envelope) announces
  durability: tags with incarnation <= the announced one and origin <= the
  announced flushed position are discharged, their anchors dropped;
* a recovery notice, broadcast whenever a partition restarts or rewinds,
  announces survival: it carries the new incarnation and the position the
  log survives to. Anchored tags from older incarnations above that
  position are phantoms, and the receiver must rewind its own unflushed
  suffix to just below the earliest phantom's anchor, bump its own
  incarnation, and broadcast its own notice. Tags at or below the survived
  position stay anchored: the record outlived this rewind but is still not
  durable, and a later, deeper rewind may yet destroy it. Treating
  survival as durability loses exactly that case.

Rewind positions strictly decrease along any cascade, so recovery
terminates. Incarnations are (lease epoch, rewinds within the epoch),
ordered lexicographically; the epoch comes from durable lease acquisition,
so incarnations stay monotonic across crashes.

Everything here is volatile by design: after a crash the barrier state is
rebuilt empty, which is sound because the barrier itself guaranteed that
nothing speculative ever reached the durable log.

Confirm matching leans on one transport property, delivery in order per
link: a notice always precedes any later confirm from the same source, so
by the time a confirm arrives, every anchor it could wrongly cover (an
old-incarnation tag above the rewind point) has already been adjudicated
by the notice. The read-time stale-tag filter below is kept as defense in
depth; under in-order delivery it should never fire.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .messages import Incarnation, Message, SpeculationTag


def confirm_payload(source: str, inc: Incarnation, flushed: int) -> dict:
    return {"confirm": {"src": source, "inc": list(inc), "flushed": flushed}}


def recovery_payload(source: str, inc: Incarnation, recovered: int) -> dict:
    return {"recovery": {"src": source, "inc": list(inc), "recovered": recovered}}


def ack_payload(source: str, seq: int) -> dict:
    return {"ack": {"src": source, "seq": seq}}


CONTROL_KEYS = ("confirm", "recovery", "ack")


def control_kind(msg: Message) -> str | None:
    if isinstance(msg.payload, dict):
        for k in CONTROL_KEYS:
            if k in msg.payload:
                return k
    return None


@dataclass
class Anchor:
    inc: Incarnation
    origin: int   # logpos of the producing record at the source
    logpos: int   # our admitting record's position; the barrier sits just below


@dataclass
class SpeculationManager:
    source: str                      # our own partition name, e.g. "p2"
    incarnation: Incarnation
    # receiver side
    anchors: dict[str, list[Anchor]] = field(default_factory=dict)
    # durability floors, advanced only by confirms and piggybacked floors
    floors: dict[str, tuple[Incarnation, int]] = field(default_factory=dict)
    # newest recovery notice per source: (incarnation, survived position)
    adjudicated: dict[str, tuple[Incarnation, int]] = field(default_factory=dict)
    # sender side: unconfirmed tagged sends, per target
    outstanding: dict[str, list[int]] = field(default_factory=dict)

    # --- sender ----------------------------------------------------------------

    def tag_for(self, origin: int) -> SpeculationTag:
        return SpeculationTag(self.source, self.incarnation, origin)

    def note_tagged_send(self, target_key: str, origin: int) -> None:
        self.outstanding.setdefault(target_key, []).append(origin)

    def confirms_due(self, flushed: int) -> list[tuple[str, dict]]:
        """Targets owed a confirm now that our flush reached `flushed`."""
        out = []
        for target_key in sorted(self.outstanding):
            origins = self.outstanding[target_key]
            if any(origin <= flushed for origin in origins):
                out.append((target_key, confirm_payload(self.source, self.incarnation, flushed)))
                self.outstanding[target_key] = [o for o in origins if o > flushed]
        return out

    # --- receiver ---------------------------------------------------------------

    def _floor(self, source: str) -> tuple[Incarnation, int]:
        return self.floors.get(source, ((0, 0), -1))

    def _merge_floor(self, source: str, inc: Incarnation, pos: int) -> None:
        cur_inc, cur_pos = self._floor(source)
        if inc > cur_inc:
            self.floors[source] = (inc, pos)
        elif inc == cur_inc and pos > cur_pos:
            self.floors[source] = (inc, pos)

    def is_stale(self, tag: SpeculationTag) -> bool:
        """True for a tag from an incarnation known to have rolled past it."""
        inc, pos = self.adjudicated.get(tag.source, ((0, 0), -1))
        return tag.incarnation < inc and tag.origin_logpos > pos

    def needs_anchor(self, tag: SpeculationTag) -> bool:
        inc, pos = self._floor(tag.source)
        return not (tag.incarnation <= inc and tag.origin_logpos <= pos)

    def register_anchor(self, tag: SpeculationTag, admit_logpos: int) -> None:
        self.anchors.setdefault(tag.source, []).append(
            Anchor(tag.incarnation, tag.origin_logpos, admit_logpos))

    def apply_floor(self, source: str, inc: Incarnation, flushed: int) -> bool:
        """Confirm (or piggybacked floor): discharge covered anchors."""
        self._merge_floor(source, inc, flushed)
        kept, dropped = [], 0
        for a in self.anchors.get(source, []):
            if a.inc <= inc and a.origin <= flushed:
                dropped += 1
            else:
                kept.append(a)
        if source in self.anchors:
            if kept:
                self.anchors[source] = kept
            else:
                del self.anchors[source]
        return dropped > 0


    def on_recovery_notice(self, source: str, inc: Incarnation,
                           recovered: int) -> int | None:
        """Returns the position we must rewind to, or None."""
        cur_inc, _ = self.adjudicated.get(source, ((0, 0), -1))
        if inc <= cur_inc:
            return None  # duplicate or out-of-date notice
        self.adjudicated[source] = (inc, recovered)
        kept: list[Anchor] = []
        phantom_at: list[int] = []
        for a in self.anchors.get(source, []):
            if a.inc < inc and a.origin > recovered:
                phantom_at.append(a.logpos)  # produced by a rolled-back execution
            else:
                # survived the rewind (or postdates it), but survival is not
                # durability: hold the anchor until an actual confirm
                kept.append(a)
        if source in self.anchors:
            if kept:
                self.anchors[source] = kept
            else:
                del self.anchors[source]
        if not phantom_at:
            return None
        return min(phantom_at) - 1

    # --- the barrier ---------------------------------------------------------------

    def barrier(self, tip: int) -> int:
        """Highest position the flusher may reach, given live anchors."""
        lows = [a.logpos for lst in self.anchors.values() for a in lst]
        if not lows:
            return tip
        return min(min(lows) - 1, tip)

    # --- own transitions -------------------------------------------------------------

    def on_rewind(self, rewind_to: int) -> dict:
        """We rolled our unflushed suffix back to rewind_to. Tell everyone."""
        self.incarnation = (self.incarnation[0], self.incarnation[1] + 1)
        for source in list(self.anchors):
            kept = [a for a in self.anchors[source] if a.logpos <= rewind_to]
            if kept:
                self.anchors[source] = kept
            else:
                del self.anchors[source]
        for target_key in list(self.outstanding):
            kept_o = [o for o in self.outstanding[target_key] if o <= rewind_to]
            if kept_o:
                self.outstanding[target_key] = kept_o
            else:
                del self.outstanding[target_key]
        return recovery_payload(self.source, self.incarnation, rewind_to)

    def restart_notice(self, recovered: int) -> dict:
        """Broadcast after a crash restart; the manager itself starts fresh."""
        return recovery_payload(self.source, self.incarnation, recovered)
