"""Message vocabulary shared by every layer.

Instances are addressed by (name, key). A message is either an instance
message (delivered into a stateful instance's session) or a task start
(executed statelessly, tracked in the pending-task table). Identity rules:

* message ids are "<source>m<counter>" where the counter is part of the
  partition state, so replaying a log re-derives identical ids;
* envelope sequence numbers are per (source, target-partition) stream and
  are likewise assigned from partition state, so a redelivered or
  re-derived message keeps its identity and dedup stays correct.

Speculation tags mark messages whose producing record was not yet durable
when the message left its partition. The tag carries the sender incarnation
(lease epoch, rewind count) so a receiver can tell a stale pre-rewind send
from a fresh one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .util import qtoken, stable_hash32, unqtoken

# (lease epoch, rewinds within that epoch); ordered lexicographically.
Incarnation = tuple[int, int]


@dataclass(frozen=True, order=True)
class InstanceId:
    name: str
    key: str

    def __post_init__(self) -> None:
        if not self.name or not self.key:
            raise ValueError("instance name and key must be non-empty")

    @property
    def skey(self) -> str:
        return f"{qtoken(self.name)}|{qtoken(self.key)}"

    @staticmethod
    def from_skey(skey: str) -> "InstanceId":
        name, _, key = skey.partition("|")
        return InstanceId(unqtoken(name), unqtoken(key))

    def to_obj(self) -> list[str]:
        return [self.name, self.key]

    @staticmethod
    def from_obj(obj: Any) -> "InstanceId":
        return InstanceId(obj[0], obj[1])


def partition_of(instance: InstanceId, partitions: int) -> int:
    # Fixed, documented placement hash: crc32 of "name|key" mod partition count.
    return stable_hash32(instance.skey) % partitions


@dataclass(frozen=True)
class SpeculationTag:
    source: str                 # partition id string, e.g. "p3"
    incarnation: Incarnation
    origin_logpos: int

    def to_obj(self) -> dict:
        return {"src": self.source, "inc": list(self.incarnation), "pos": self.origin_logpos}

    @staticmethod
    def from_obj(obj: Any) -> "SpeculationTag":
        return SpeculationTag(obj["src"], (obj["inc"][0], obj["inc"][1]), obj["pos"])


@dataclass
class Message:
    """An instance message: consumed by exactly one step of its target."""

    id: str
    target: InstanceId
    payload: Any
    # logpos of the record that produced this message locally; 0 for messages
    # arriving from the durable input queue. Conservative mode refuses to
    # schedule a message before its producing record is flushed.
    ready_at: int = 0
    tag: SpeculationTag | None = None

    def to_obj(self) -> dict:
        obj: dict = {"id": self.id, "target": self.target.to_obj(), "payload": self.payload,
                     "ready_at": self.ready_at}
        if self.tag is not None:
            obj["tag"] = self.tag.to_obj()
        return obj

    @staticmethod
    def from_obj(obj: Any) -> "Message":
        tag = SpeculationTag.from_obj(obj["tag"]) if "tag" in obj else None
        return Message(obj["id"], InstanceId.from_obj(obj["target"]), obj["payload"],
                       obj.get("ready_at", 0), tag)


@dataclass
class TaskSpec:
    """A pending stateless task, tracked in the partition's task table."""

    task_id: str                # engine-level id, "p<pid>t<counter>"
    msg_id: str                 # the task-start message's graph identity
    schedule_id: int            # the scheduling orchestration's awaitable id
    task_name: str
    input: Any
    respond_to: InstanceId
    origin_logpos: int = 0      # record that created the task

    def to_obj(self) -> dict:
        return {"task_id": self.task_id, "msg_id": self.msg_id, "schedule_id": self.schedule_id,
                "task_name": self.task_name, "input": self.input,
                "respond_to": self.respond_to.to_obj(), "origin_logpos": self.origin_logpos}

    @staticmethod
    def from_obj(obj: Any) -> "TaskSpec":
        return TaskSpec(obj["task_id"], obj["msg_id"], obj["schedule_id"], obj["task_name"],
                        obj["input"], InstanceId.from_obj(obj["respond_to"]), obj["origin_logpos"])


# --- instance message payload builders --------------------------------------
# Payloads are plain JSON-shaped dicts with a single discriminating key.

def start_payload(workflow: str, input: Any, req: str | None = None) -> dict:
    body: dict = {"start": {"workflow": workflow, "input": input}}
    if req is not None:
        body["start"]["req"] = req
    return body


def task_result_payload(schedule_id: int, result: Any, failed: bool = False) -> dict:
    body: dict = {"task_id": schedule_id, "result": result}
    if failed:
        body["failed"] = True
    return {"task_result": body}


def op_payload(op_id: int, name: str, input: Any, respond_to: InstanceId,
               lock_key: str | None = None) -> dict:
    body: dict = {"op_id": op_id, "name": name, "input": input, "respond_to": respond_to.to_obj()}
    if lock_key is not None:
        body["lock"] = lock_key
    return {"op": body}


def op_result_payload(op_id: int, result: Any, failed: bool = False) -> dict:
    body: dict = {"op_id": op_id, "result": result}
    if failed:
        body["failed"] = True
    return {"op_result": body}


def lock_request_payload(lock_key: str, targets: list[InstanceId], idx: int,
                         requester: InstanceId, lock_id: int) -> dict:
    return {"lock": {"lock_key": lock_key, "targets": [t.to_obj() for t in targets],
                     "idx": idx, "requester": requester.to_obj(), "lock_id": lock_id}}


def lock_granted_payload(lock_id: int, lock_key: str) -> dict:
    return {"lock_granted": {"lock_id": lock_id, "lock_key": lock_key}}


def unlock_payload(lock_key: str) -> dict:
    return {"unlock": {"lock_key": lock_key}}
