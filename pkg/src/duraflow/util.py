"""Shared helpers: canonical serialization, stable hashing, token quoting.

Everything that crosses a durability or comparison boundary goes through
canonical JSON: sorted keys, compact separators, UTF-8. Two equal values
always encode to identical bytes, which is what the determinism and
recovery checks compare.
"""
from __future__ import annotations

import json
import zlib
from urllib.parse import quote, unquote


def canonical_json(obj: object) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def canonical_loads(data: bytes | str) -> object:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return json.loads(data)


def jsoncopy(obj: object) -> object:
    """Deep copy for JSON-shaped values (payloads, state snapshots)."""
    return json.loads(json.dumps(obj))


def stable_hash32(text: str) -> int:
    # Python's builtin hash() is salted per process; crc32 is stable across
    # runs and platforms, which placement and dedup keys require.
    return zlib.crc32(text.encode("utf-8")) & 0xFFFFFFFF


def qtoken(text: str) -> str:
    """Quote a string into a whitespace-free token for line-based formats."""
    return quote(text, safe="")


def unqtoken(token: str) -> str:
    return unquote(token)
