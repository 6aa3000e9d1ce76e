"""Partition-to-node placement: balanced assignment, minimal-move rebalance.

Partitions are the unit of ownership; nodes host a contiguous-ish share of
them. On membership change the new plan keeps every partition where it is
unless a quota forces a move, so scaling from one node to N moves exactly
P - quota(old node) partitions and nothing else. Quotas split P as evenly
as possible: P // N each, plus one extra for the first P % N nodes in name
order.

Ownership transfer itself is the lease protocol's job (the new owner bumps
the epoch and recovers from checkpoint + log); these functions only decide
who should own what.
"""
from __future__ import annotations

from .errors import ConfigInvalid


def quotas(partitions: int, nodes: list[str]) -> dict[str, int]:
    if not nodes:
        raise ConfigInvalid("cannot place partitions on zero nodes")
    if len(set(nodes)) != len(nodes):
        raise ConfigInvalid(f"duplicate node names: {nodes}")
    ordered = sorted(nodes)
    base, extra = divmod(partitions, len(ordered))
    return {n: base + (1 if i < extra else 0) for i, n in enumerate(ordered)}


def assign(partitions: int, nodes: list[str]) -> dict[int, str]:
    """Fresh balanced assignment: consecutive runs of partitions per node."""
    quota = quotas(partitions, nodes)
    out: dict[int, str] = {}
    pid = 0
    for n in sorted(nodes):
        for _ in range(quota[n]):
            out[pid] = n
            pid += 1
    return out


def rebalance(current: dict[int, str], nodes: list[str]) -> dict[int, str]:
    """New assignment over `nodes` moving as few partitions as possible.

    Every surviving node keeps its own partitions up to its quota (lowest
    pids first, so repeated rebalances are stable); everything else pools
    and refills the nodes still under quota.
    """
    quota = quotas(len(current), nodes)
    alive = set(nodes)
    out: dict[int, str] = {}
    pool: list[int] = []
    held: dict[str, list[int]] = {n: [] for n in sorted(nodes)}
    for pid in sorted(current):
        n = current[pid]
        if n in alive:
            held[n].append(pid)
        else:
            pool.append(pid)
    for n in sorted(nodes):
        keep = held[n][:quota[n]]
        pool.extend(held[n][quota[n]:])
        for pid in keep:
            out[pid] = n
    pool.sort()
    for n in sorted(nodes):
        room = quota[n] - sum(1 for pid in out if out[pid] == n)
        for _ in range(room):
            out[pool.pop(0)] = n
    assert not pool
    return out


def moves(old: dict[int, str], new: dict[int, str]) -> list[int]:
    """Partitions whose owner changes, in pid order."""
    return sorted(pid for pid in new if old.get(pid) != new[pid])
