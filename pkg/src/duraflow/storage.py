"""Durable host: commit logs, checkpoints, leases, and input queues.

Two backends share one interface. MemStore keeps everything in process
memory and backs the simulator, where "durable" means "survives a modeled
crash" (the simulator throws away runtime objects but keeps the store).
FileStore writes real files with fsync on every append and atomic renames
for checkpoints and leases, and backs the threaded real-time driver.

Layout under a root:

    p00/commit.log      framed events + epoch markers
    p00/chk-<logpos>    checkpoint covering events [0, logpos)
    p00/lease           current lease record
    queues/q-p00.log    client input queue for partition 0

Leases carry a monotonically increasing epoch. Every acquisition bumps it,
including re-acquisition by the same owner after a restart, so the epoch
number totally orders ownership periods of a partition across crashes.
Callers pass `now_us` explicitly: the store has no clock of its own, which
keeps simulated time honest.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

from .errors import CorruptCheckpoint, LeaseHeld, LeaseLost, StorageFailure
from .framing import decode_checkpoint, encode_checkpoint, frame, scan_log
from .partition import (Envelope, PEvent, PartitionState, apply_event, event_from_obj,
                        fold_events)
from .util import canonical_json, canonical_loads


def pdir(pid: int) -> str:
    return f"p{pid:02d}"


def qname(pid: int) -> str:
    return f"q-{pdir(pid)}"


# --- lease record ------------------------------------------------------------

def _encode_lease(owner: str, epoch: int, expires_us: int) -> bytes:
    return frame(canonical_json({"owner": owner, "epoch": epoch, "expires_us": expires_us}))


def _decode_lease(data: bytes) -> dict | None:
    if len(data) < 8:
        return None
    length, crc = struct.unpack_from("<II", data, 0)
    payload = data[8:8 + length]
    if len(payload) != length or (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
        return None
    return canonical_loads(payload)


class _LeaseMixin:
    def _lease_load(self, pid: int) -> dict | None:
        raise NotImplementedError

    def _lease_store(self, pid: int, data: bytes) -> None:
        raise NotImplementedError

    def lease_acquire(self, pid: int, owner: str, now_us: int, ttl_us: int) -> int:
        cur = self._lease_load(pid)
        if cur is not None and cur["owner"] != owner and cur["expires_us"] > now_us:
            raise LeaseHeld(f"partition {pid} leased to {cur['owner']} "
                            f"until {cur['expires_us']}")
        epoch = (cur["epoch"] if cur is not None else 0) + 1
        self._lease_store(pid, _encode_lease(owner, epoch, now_us + ttl_us))
        return epoch

    def lease_renew(self, pid: int, owner: str, epoch: int, now_us: int, ttl_us: int) -> None:
        cur = self._lease_load(pid)
        if cur is None or cur["owner"] != owner or cur["epoch"] != epoch:
            raise LeaseLost(f"partition {pid}: lease epoch {epoch} superseded")
        self._lease_store(pid, _encode_lease(owner, epoch, now_us + ttl_us))

    def lease_release(self, pid: int, owner: str, epoch: int) -> None:
        cur = self._lease_load(pid)
        if cur is not None and cur["owner"] == owner and cur["epoch"] == epoch:
            self._lease_store(pid, _encode_lease(owner, epoch, 0))

    def lease_peek(self, pid: int) -> dict | None:
        return self._lease_load(pid)


# --- in-memory backend ----------------------------------------------------------

class MemStore(_LeaseMixin):
    def __init__(self) -> None:
        self._logs: dict[int, bytearray] = {}
        self._chks: dict[int, dict[int, bytes]] = {}
        self._leases: dict[int, bytes] = {}
        self._queues: dict[str, bytearray] = {}

    def log_append(self, pid: int, data: bytes) -> None:
        self._logs.setdefault(pid, bytearray()).extend(data)

    def log_read(self, pid: int) -> bytes:
        return bytes(self._logs.get(pid, b""))

    def checkpoint_write(self, pid: int, logpos: int, snapshot: bytes) -> None:
        self._chks.setdefault(pid, {})[logpos] = encode_checkpoint(logpos, snapshot)

    def checkpoint_positions(self, pid: int) -> list[int]:
        return sorted(self._chks.get(pid, {}))

    def checkpoint_read(self, pid: int, logpos: int) -> bytes:
        try:
            data = self._chks[pid][logpos]
        except KeyError:
            raise CorruptCheckpoint(f"no checkpoint at {logpos} for partition {pid}") from None
        return decode_checkpoint(data)[1]

    def checkpoint_prune(self, pid: int, keep: int = 2) -> None:
        chks = self._chks.get(pid, {})
        for pos in sorted(chks)[:-keep] if keep else sorted(chks):
            del chks[pos]

    def _lease_load(self, pid: int) -> dict | None:
        data = self._leases.get(pid)
        return None if data is None else _decode_lease(data)

    def _lease_store(self, pid: int, data: bytes) -> None:
        self._leases[pid] = data

    def queue_append(self, qid: str, data: bytes) -> None:
        self._queues.setdefault(qid, bytearray()).extend(data)

    def queue_read(self, qid: str) -> bytes:
        return bytes(self._queues.get(qid, b""))


# --- file backend ------------------------------------------------------------------

class FileStore(_LeaseMixin):
    def __init__(self, root: str) -> None:
        self.root = root
        os.makedirs(os.path.join(root, "queues"), exist_ok=True)

    def _pdir(self, pid: int) -> str:
        d = os.path.join(self.root, pdir(pid))
        os.makedirs(d, exist_ok=True)
        return d

    def _append(self, path: str, data: bytes) -> None:
        with open(path, "ab") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())

    def _read(self, path: str) -> bytes:
        try:
            with open(path, "rb") as f:
                return f.read()
        except FileNotFoundError:
            return b""

    def _write_atomic(self, path: str, data: bytes) -> None:
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    def log_append(self, pid: int, data: bytes) -> None:
        self._append(os.path.join(self._pdir(pid), "commit.log"), data)

    def log_read(self, pid: int) -> bytes:
        return self._read(os.path.join(self._pdir(pid), "commit.log"))

    def checkpoint_write(self, pid: int, logpos: int, snapshot: bytes) -> None:
        path = os.path.join(self._pdir(pid), f"chk-{logpos}")
        self._write_atomic(path, encode_checkpoint(logpos, snapshot))

    def checkpoint_positions(self, pid: int) -> list[int]:
        out = []
        for name in os.listdir(self._pdir(pid)):
            if name.startswith("chk-") and not name.endswith(".tmp"):
                try:
                    out.append(int(name[4:]))
                except ValueError:
                    continue
        return sorted(out)

    def checkpoint_read(self, pid: int, logpos: int) -> bytes:
        data = self._read(os.path.join(self._pdir(pid), f"chk-{logpos}"))
        if not data:
            raise CorruptCheckpoint(f"no checkpoint at {logpos} for partition {pid}")
        got_pos, snapshot = decode_checkpoint(data)
        if got_pos != logpos:
            raise CorruptCheckpoint(f"checkpoint file chk-{logpos} claims logpos {got_pos}")
        return snapshot

    def checkpoint_prune(self, pid: int, keep: int = 2) -> None:
        for pos in self.checkpoint_positions(pid)[:-keep] if keep else self.checkpoint_positions(pid):
            try:
                os.unlink(os.path.join(self._pdir(pid), f"chk-{pos}"))
            except FileNotFoundError:
                pass

    def _lease_load(self, pid: int) -> dict | None:
        return _decode_lease(self._read(os.path.join(self._pdir(pid), "lease")))

    def _lease_store(self, pid: int, data: bytes) -> None:
        self._write_atomic(os.path.join(self._pdir(pid), "lease"), data)

    def queue_append(self, qid: str, data: bytes) -> None:
        self._append(os.path.join(self.root, "queues", f"{qid}.log"), data)

    def queue_read(self, qid: str) -> bytes:
        return self._read(os.path.join(self.root, "queues", f"{qid}.log"))


# --- recovery ------------------------------------------------------------------------

@dataclass
class Recovered:
    state: PartitionState
    events: list[PEvent]   # the full durable event sequence, already folded in
    last_epoch: int        # highest epoch marker in the log
    from_checkpoint: int   # logpos the snapshot covered; 0 when folded from scratch
    clean: bool            # False when a torn tail was dropped


def parse_queue(data: bytes) -> list[Envelope]:
    return [Envelope.from_obj(obj) for obj in scan_log(data).events]


def recover_partition_state(store, pid: int, partitions: int) -> Recovered:
    """Rebuild a partition from its durable artifacts alone.

    Newest valid checkpoint wins; a checkpoint that fails its checksum or
    outruns the log falls back to the next older one, and with none left
    the state is folded from the start of the log.
    """
    scan = scan_log(store.log_read(pid))
    events = [event_from_obj(obj) for obj in scan.events]

    base: PartitionState | None = None
    from_checkpoint = 0
    for pos in reversed(store.checkpoint_positions(pid)):
        if pos > len(events):
            continue
        try:
            snapshot = store.checkpoint_read(pid, pos)
            cand = PartitionState.from_obj(canonical_loads(snapshot))
        except (CorruptCheckpoint, KeyError, ValueError):
            continue
        if cand.log_len != pos:
            continue
        base, from_checkpoint = cand, pos
        break

    if base is None:
        state = fold_events(pid, partitions, events)
    else:
        state = base
        for ev in events[from_checkpoint:]:
            apply_event(state, ev)
    if state.pid != pid or state.partitions != partitions:
        raise StorageFailure(f"recovered state identifies as partition {state.pid}"
                             f"/{state.partitions}, wanted {pid}/{partitions}")
    return Recovered(state, events, scan.last_epoch, from_checkpoint, scan.clean)
