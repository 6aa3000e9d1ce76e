"""Byte framing for commit logs, input queues, and checkpoints.

Every log record is `length u32le | crc32(payload) u32le | payload`.
The payload's first byte discriminates:

* 0x01: an engine event; the rest is canonical JSON,
* 0xFF: an epoch marker; the rest is the lease epoch as u64le.

Epoch markers are fencing breadcrumbs written on lease acquisition. They
occupy no log position: positions count events only, so a partition that
crashed and restarted three times still numbers its events contiguously.

A checkpoint file is `logpos u64le | crc32(snapshot) u32le | snapshot`,
where logpos is the number of events folded into the snapshot.

Readers stop at the first incomplete or corrupt record and report how many
bytes were valid: a torn tail from a crash mid-append truncates to the
last whole record instead of poisoning recovery.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from .errors import CorruptCheckpoint
from .util import canonical_json, canonical_loads

RECORD_EVENT = 0x01
RECORD_EPOCH = 0xFF

_HDR = struct.Struct("<II")       # length, crc
_U64 = struct.Struct("<Q")


def frame(payload: bytes) -> bytes:
    return _HDR.pack(len(payload), zlib.crc32(payload) & 0xFFFFFFFF) + payload


def event_record(obj: dict) -> bytes:
    return frame(bytes([RECORD_EVENT]) + canonical_json(obj))


def epoch_record(epoch: int) -> bytes:
    return frame(bytes([RECORD_EPOCH]) + _U64.pack(epoch))


@dataclass
class ScanResult:
    events: list[dict]     # decoded event payloads, in file order
    last_epoch: int        # highest epoch marker seen; 0 if none
    valid_len: int         # bytes up to and including the last whole record
    clean: bool            # False if a torn or corrupt tail was dropped


def scan_log(data: bytes) -> ScanResult:
    events: list[dict] = []
    last_epoch = 0
    off = 0
    n = len(data)
    while True:
        if off + _HDR.size > n:
            return ScanResult(events, last_epoch, off, off == n)
        length, crc = _HDR.unpack_from(data, off)
        start = off + _HDR.size
        end = start + length
        if end > n:
            return ScanResult(events, last_epoch, off, False)
        payload = data[start:end]
        if (zlib.crc32(payload) & 0xFFFFFFFF) != crc or length == 0:
            return ScanResult(events, last_epoch, off, False)
        kind = payload[0]
        if kind == RECORD_EVENT:
            events.append(canonical_loads(payload[1:]))
        elif kind == RECORD_EPOCH:
            last_epoch = max(last_epoch, _U64.unpack(payload[1:])[0])
        else:
            return ScanResult(events, last_epoch, off, False)
        off = end


def encode_checkpoint(logpos: int, snapshot: bytes) -> bytes:
    return _U64.pack(logpos) + struct.pack("<I", zlib.crc32(snapshot) & 0xFFFFFFFF) + snapshot


def decode_checkpoint(data: bytes) -> tuple[int, bytes]:
    if len(data) < _U64.size + 4:
        raise CorruptCheckpoint("checkpoint shorter than its header")
    logpos = _U64.unpack_from(data, 0)[0]
    crc = struct.unpack_from("<I", data, _U64.size)[0]
    snapshot = data[_U64.size + 4:]
    if (zlib.crc32(snapshot) & 0xFFFFFFFF) != crc:
        raise CorruptCheckpoint(f"checkpoint for logpos {logpos} fails its checksum")
    return logpos, snapshot
