"""Built-in workloads: registries, request generators, result checkers.

Each workload bundles the three things a driver needs: the workflow/entity
definitions, a deterministic request list for a given (n, seed), and a
checker that turns the observed results and final entity states into a list
of violations (empty means the run is acceptable).

Request ids follow the driver convention r%06d in submission order, so
checkers can pair requests with results positionally.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any, Callable

from .messages import InstanceId
from .workflow import EntityDefinition, WorkflowDefinition, WorkflowRegistry

BANK_ACCOUNTS = 100
BANK_INITIAL_BALANCE = 100


def req_id(i: int) -> str:
    return f"r{i:06d}"


@dataclass(frozen=True)
class Request:
    instance: InstanceId
    input: Any


@dataclass(frozen=True)
class Workload:
    name: str
    make_registry: Callable[[], WorkflowRegistry]
    make_requests: Callable[[int, int], list[Request]]  # (n, seed)
    # check(requests, results by req id, entity user states by skey)
    check: Callable[[list[Request], dict[str, Any], dict[str, Any]], list[str]]


def _require_all_results(requests, results, out):
    for i in range(len(requests)):
        if req_id(i) not in results:
            out.append(f"request {req_id(i)} never completed")


# --- hello: three chained activity calls --------------------------------------

def _hello_registry() -> WorkflowRegistry:
    reg = WorkflowRegistry()
    reg.add_activity("greet", lambda place: f"hello {place}")

    def hello(ctx):
        out = []
        for place in ctx.get_input():
            out.append((yield ctx.call_activity("greet", place)))
        return out

    reg.add_workflow(WorkflowDefinition("Hello", hello))
    return reg


def _hello_requests(n: int, seed: int) -> list[Request]:
    return [Request(InstanceId("Hello", f"h{i:05d}"), ["alpha", "beta", "gamma"])
            for i in range(n)]


def _hello_check(requests, results, states) -> list[str]:
    out: list[str] = []
    _require_all_results(requests, results, out)
    for i in range(len(requests)):
        got = results.get(req_id(i))
        if got is not None and got != ["hello alpha", "hello beta", "hello gamma"]:
            out.append(f"{req_id(i)}: unexpected result {got!r}")
    return out


# --- seq: N increments through stateless tasks ----------------------------------

def _seq_workload(name: str, length: int) -> Workload:
    def make_registry() -> WorkflowRegistry:
        reg = WorkflowRegistry()
        reg.add_activity("bump", lambda x: x + 1)

        def sequence(ctx):
            x = ctx.get_input()
            for _ in range(length):
                x = yield ctx.call_activity("bump", x)
            return x

        reg.add_workflow(WorkflowDefinition("Sequence", sequence))
        return reg

    def make_requests(n: int, seed: int) -> list[Request]:
        return [Request(InstanceId("Sequence", f"s{i:05d}"), 41 + i) for i in range(n)]

    def check(requests, results, states) -> list[str]:
        out: list[str] = []
        _require_all_results(requests, results, out)
        for i, r in enumerate(requests):
            got = results.get(req_id(i))
            if got is not None and got != r.input + length:
                out.append(f"{req_id(i)}: expected {r.input + length}, got {got!r}")
        return out

    return Workload(name, make_registry, make_requests, check)


# --- bank: locked transfers between account entities ---------------------------

def _account_ops():
    def get(state, _input):
        return state, state

    def add(state, delta):
        new = state + delta
        if new < 0:
            raise ValueError(f"balance would go negative: {state} + {delta}")
        return new, new

    return {"get": get, "add": add}


def _bank_registry() -> WorkflowRegistry:
    reg = WorkflowRegistry()
    reg.add_entity(EntityDefinition("Account", BANK_INITIAL_BALANCE, _account_ops()))

    def transfer(ctx):
        spec = ctx.get_input()
        src = InstanceId("Account", spec["src"])
        dst = InstanceId("Account", spec["dst"])
        amount = spec["amount"]
        token = yield ctx.lock([src, dst])
        balance = yield ctx.call_entity(src, "get", None)
        if balance < amount:
            ctx.release(token)
            return "insufficient"
        yield ctx.call_entity(src, "add", -amount)
        yield ctx.call_entity(dst, "add", amount)
        ctx.release(token)
        return "ok"

    reg.add_workflow(WorkflowDefinition("Transfer", transfer))
    return reg


def account_key(i: int) -> str:
    return f"a{i:03d}"


def _bank_requests(n: int, seed: int) -> list[Request]:
    rng = random.Random(f"{seed}:bank")
    out = []
    for i in range(n):
        src = rng.randrange(BANK_ACCOUNTS)
        dst = rng.randrange(BANK_ACCOUNTS - 1)
        if dst >= src:
            dst += 1
        out.append(Request(InstanceId("Transfer", f"t{i:05d}"),
                           {"src": account_key(src), "dst": account_key(dst),
                            "amount": rng.randrange(1, 51)}))
    return out


def _bank_check(requests, results, states) -> list[str]:
    out: list[str] = []
    _require_all_results(requests, results, out)
    for i in range(len(requests)):
        got = results.get(req_id(i))
        if got is not None and got not in ("ok", "insufficient"):
            out.append(f"{req_id(i)}: unexpected result {got!r}")
    total = 0
    for i in range(BANK_ACCOUNTS):
        skey = InstanceId("Account", account_key(i)).skey
        balance = states.get(skey, BANK_INITIAL_BALANCE)  # untouched accounts keep the float
        if balance < 0:
            out.append(f"account {account_key(i)} is negative: {balance}")
        total += balance
    want = BANK_ACCOUNTS * BANK_INITIAL_BALANCE
    if total != want:
        out.append(f"money not conserved: {total} != {want}")
    return out


# --- counter: one entity bump per request --------------------------------------

COUNTER_CELLS = 10


def _counter_registry() -> WorkflowRegistry:
    reg = WorkflowRegistry()
    reg.add_entity(EntityDefinition("Cell", 0, _account_ops()))

    def bump(ctx):
        cell = InstanceId("Cell", ctx.get_input())
        return (yield ctx.call_entity(cell, "add", 1))

    reg.add_workflow(WorkflowDefinition("Bump", bump))
    return reg


def _counter_requests(n: int, seed: int) -> list[Request]:
    return [Request(InstanceId("Bump", f"b{i:05d}"), f"c{i % COUNTER_CELLS:02d}")
            for i in range(n)]


def _counter_check(requests, results, states) -> list[str]:
    out: list[str] = []
    _require_all_results(requests, results, out)
    per_cell: dict[str, int] = {}
    for r in requests:
        per_cell[r.input] = per_cell.get(r.input, 0) + 1
    for cell, hits in sorted(per_cell.items()):
        skey = InstanceId("Cell", cell).skey
        if states.get(skey, 0) != hits:
            out.append(f"cell {cell}: {hits} bumps but state is {states.get(skey, 0)}")
    # each bump saw a distinct post-increment value
    seen: dict[str, set] = {}
    for i, r in enumerate(requests):
        got = results.get(req_id(i))
        if got is None:
            continue
        vals = seen.setdefault(r.input, set())
        if got in vals or not 1 <= got <= per_cell[r.input]:
            out.append(f"{req_id(i)}: bump of {r.input} returned {got!r}")
        vals.add(got)
    return out


# --- ping: chatty workflow <-> entity round trips -------------------------------

PING_ROUNDS = 4


def _ping_registry() -> WorkflowRegistry:
    reg = WorkflowRegistry()
    reg.add_entity(EntityDefinition("Cell", 0, _account_ops()))

    def ping(ctx):
        cell = InstanceId("Cell", ctx.get_input())
        for _ in range(PING_ROUNDS):
            yield ctx.call_entity(cell, "add", 1)
        return (yield ctx.call_entity(cell, "get", None))

    reg.add_workflow(WorkflowDefinition("Ping", ping))
    return reg


def _ping_requests(n: int, seed: int) -> list[Request]:
    return [Request(InstanceId("Ping", f"p{i:05d}"), f"pc{i:05d}") for i in range(n)]


def _ping_check(requests, results, states) -> list[str]:
    out: list[str] = []
    _require_all_results(requests, results, out)
    for i, r in enumerate(requests):
        got = results.get(req_id(i))
        if got is not None and got != PING_ROUNDS:
            out.append(f"{req_id(i)}: expected {PING_ROUNDS}, got {got!r}")
        skey = InstanceId("Cell", r.input).skey
        if req_id(i) in results and states.get(skey) != PING_ROUNDS:
            out.append(f"cell {r.input}: state {states.get(skey)!r} after {PING_ROUNDS} adds")
    return out


WORKLOADS: dict[str, Workload] = {
    "hello": Workload("hello", _hello_registry, _hello_requests, _hello_check),
    "seq": _seq_workload("seq", 2),
    "seq10": _seq_workload("seq10", 10),
    "bank": Workload("bank", _bank_registry, _bank_requests, _bank_check),
    "counter": Workload("counter", _counter_registry, _counter_requests, _counter_check),
    "ping": Workload("ping", _ping_registry, _ping_requests, _ping_check),
}

# long-form names accepted in configs
ALIASES = {"hello_seq": "hello", "task_seq": "seq10"}


def resolve(name: str) -> Workload | None:
    """Registry lookup; task_seq:N builds an N-step sequence on the fly."""
    if name in WORKLOADS:
        return WORKLOADS[name]
    if name in ALIASES:
        return WORKLOADS[ALIASES[name]]
    if name.startswith("task_seq:"):
        try:
            length = int(name.split(":", 1)[1])
        except ValueError:
            return None
        if length >= 1:
            return _seq_workload(name, length)
    return None
