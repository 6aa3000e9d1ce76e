"""Cross-partition protocol: acks, speculation, crash recovery, rewinds."""
from __future__ import annotations

import pytest

from duraflow.errors import PartitionError
from duraflow.messages import InstanceId, partition_of
from duraflow.runtime import Observer
from duraflow.workflow import DONE
from duraflow.storage import parse_queue, qname
from tests.harness import ManualCluster, spread_locker_instances
from tests.test_partition import find_key
from tests.test_workflow import seq_registry


@pytest.mark.parametrize("mode", ["conservative", "local", "global"])
def test_cross_partition_lock_and_ops_complete(mode):
    reg, w, a, b = spread_locker_instances()
    cluster = ManualCluster(reg, partitions=3, mode=mode)
    cluster.submit(w, None, req="r000001")
    cluster.pump()

    rec = cluster.instance_record(w)
    assert rec.status == DONE and rec.result == [1, 1]
    assert cluster.instance_record(a).entity_state.user_state == 1
    assert cluster.instance_record(b).entity_state.user_state == 1
    assert [r["req"] for r in cluster.reports] == ["r000001"]
    # every outbox drained: all sends were acknowledged and retired
    for rt in cluster.runtimes.values():
        assert rt.live.outbox == []
        assert rt.live.sessions == {}


@pytest.mark.parametrize("mode", ["conservative", "local", "global"])
def test_contending_critical_sections_across_partitions(mode):
    reg, w, a, b = spread_locker_instances()
    cluster = ManualCluster(reg, partitions=3, mode=mode)
    w2 = InstanceId("LockerX", find_key("LockerX", 3, 0, avoid={w.key}))
    cluster.submit(w, None, req="r000001")
    cluster.submit(w2, None, req="r000002")
    cluster.pump()

    results = sorted([cluster.instance_record(w).result, cluster.instance_record(w2).result])
    assert results == [[1, 1], [2, 2]]
    assert cluster.instance_record(a).entity_state.user_state == 2
    assert cluster.instance_record(b).entity_state.user_state == 2


def test_speculative_sends_are_tagged_and_barrier_blocks_receiver_flush():
    reg, w, a, b = spread_locker_instances()
    cluster = ManualCluster(reg, partitions=3, mode="global")
    cluster.no_flush = {0, 1, 2}
    cluster.submit(w, None, req="r000001")
    cluster.pump()

    # with no partition flushing, the workflow still finishes end to end
    rec = cluster.instance_record(w)
    assert rec.status == DONE and rec.result == [1, 1]
    # but nothing is durable, anchors hold, and nobody may flush past them
    for pid in (1, 2):
        rt = cluster.runtimes[pid]
        assert rt.spec.anchors, f"partition {pid} should hold anchors"
        assert rt.spec.barrier(rt.live.log_len - 1) < rt.live.log_len - 1
    # reports wait for durability even in the speculating mode
    assert cluster.reports == []

    # release the brakes: flushes propagate confirms and the report escapes
    cluster.no_flush = set()
    cluster.pump()
    assert [r["req"] for r in cluster.reports] == ["r000001"]
    for rt in cluster.runtimes.values():
        assert not rt.spec.anchors
        assert rt.pending == []


def test_conservative_mode_never_tags():
    reg, w, a, b = spread_locker_instances()
    cluster = ManualCluster(reg, partitions=3, mode="conservative")

    seen_tags = []
    original = ManualCluster.route

    def spying_route(self, sends):
        for dst, env in sends:
            if env.msg.tag is not None:
                seen_tags.append(env)
        original(self, sends)

    ManualCluster.route = spying_route
    try:
        cluster.submit(w, None, req="r000001")
        cluster.pump()
    finally:
        ManualCluster.route = original
    assert seen_tags == []
    assert cluster.instance_record(w).result == [1, 1]


def test_data_straggler_above_floor_is_dropped_quietly():
    # An envelope whose seq lands above floor+1 overtook a loss or arrived
    # after the receiver rewound. It is provably unacked, so the sender will
    # resend it in order; the receiver records nothing and must not raise.
    from duraflow.messages import Message
    from duraflow.partition import Envelope

    reg, w, a, b = spread_locker_instances()
    cluster = ManualCluster(reg, partitions=3, mode="conservative")
    cluster.submit(w, None, req="r000001")
    cluster.pump()

    pid_a = partition_of(a, 3)
    rt = cluster.runtimes[pid_a]
    src = next(s for s in sorted(rt.live.dedup) if s != "c0")
    floor = rt.live.dedup[src]
    log_before = rt.live.log_len

    ghost = Envelope(src, floor + 5, Message("p9m99", a, {"op": {
        "op_id": "x", "name": "add", "input": 1,
        "respond_to": w.to_obj(), "origin": 0}}))
    assert rt.ingest_remote([ghost], cluster.now) is False
    assert rt.live.log_len == log_before
    assert rt.live.dedup[src] == floor  # untouched: the resend must still be admissible


def test_crash_of_speculating_sender_rewinds_receivers():
    reg, w, a, b = spread_locker_instances()
    cluster = ManualCluster(reg, partitions=3, mode="global")
    cluster.no_flush = {0, 1, 2}
    cluster.submit(w, None, req="r000001")
    cluster.pump()

    # partition 0 (the workflow) loses everything it never flushed
    p1_log_before = cluster.runtimes[1].live.log_len
    assert p1_log_before > 0
    cluster.crash(0)
    cluster.no_flush = set()
    cluster.boot(0)
    cluster.pump()

    # receivers rolled back their speculative suffixes when the notice came
    rt1, rt2 = cluster.runtimes[1], cluster.runtimes[2]
    assert rt1.live.instances[a.skey].entity_state.user_state == 1
    assert rt2.live.instances[b.skey].entity_state.user_state == 1
    # the restarted partition re-reads its queue and completes for real
    rec = cluster.instance_record(w)
    assert rec.status == DONE and rec.result == [1, 1]
    assert [r["req"] for r in cluster.reports] == ["r000001"]
    for rt in cluster.runtimes.values():
        assert not rt.spec.anchors and rt.live.outbox == []


def test_receiver_crash_before_flush_is_healed_by_resend():
    reg, w, a, b = spread_locker_instances()
    cluster = ManualCluster(reg, partitions=3, mode="conservative")
    cluster.no_flush = {1}  # entity partition for `a` never flushes...
    cluster.submit(w, None, req="r000001")
    cluster.pump(rounds=30)
    assert cluster.reports == []  # stuck: p1 work is not durable, no acks flow

    cluster.crash(1)            # ...and then dies, losing its unflushed state
    cluster.no_flush = set()
    cluster.boot(1)
    cluster.now += 60_000       # let the resend timer expire
    cluster.pump()

    rec = cluster.instance_record(w)
    assert rec.status == DONE and rec.result == [1, 1]
    assert cluster.instance_record(a).entity_state.user_state == 1
    assert [r["req"] for r in cluster.reports] == ["r000001"]


def test_stale_incarnation_completions_are_discarded():
    cluster = ManualCluster(seq_registry(), partitions=1, mode="local")
    inst = InstanceId("SimpleSequence", "k0")
    cluster.submit(inst, 41, req="r000001")
    rt = cluster.runtimes[0]
    envs = parse_queue(cluster.store.queue_read(qname(0)))
    rt.ingest_queue(envs)

    plan, inc = rt.plan_step()
    outcome = rt.execute_plan(plan)
    log_before = rt.live.log_len
    stale = (inc[0], inc[1] + 1)  # pretend the runtime rewound meanwhile
    assert rt.complete_step(plan, outcome, stale) is False
    assert rt.live.log_len == log_before
    # the instance is no longer busy, so the step can be replanned and applied
    plan2, inc2 = rt.plan_step()
    assert rt.complete_step(plan2, rt.execute_plan(plan2), inc2) is True


def test_rewind_below_durable_prefix_is_refused():
    cluster = ManualCluster(seq_registry(), partitions=1, mode="local")
    inst = InstanceId("SimpleSequence", "k0")
    cluster.submit(inst, 41, req="r000001")
    cluster.pump()
    rt = cluster.runtimes[0]
    assert rt.flushed >= 0
    with pytest.raises(PartitionError):
        rt.rewind(rt.flushed - 1)


def test_restart_recovers_durable_state_and_finishes():
    cluster = ManualCluster(seq_registry(), partitions=1, mode="conservative")
    inst = InstanceId("SimpleSequence", "k0")
    cluster.submit(inst, 41, req="r000001")
    # run just a few rounds: some progress, then a crash
    try:
        cluster.pump(rounds=2)
    except AssertionError:
        pass
    cluster.crash(0)
    cluster.boot(0)
    cluster.pump()
    rec = cluster.instance_record(inst)
    assert rec.status == DONE and rec.result == 43
    assert [r["req"] for r in cluster.reports] == ["r000001"]


def test_checkpoint_cuts_at_flushed_position_and_recovery_uses_it():
    cluster = ManualCluster(seq_registry(), partitions=1, mode="conservative")
    inst = InstanceId("SimpleSequence", "k0")
    cluster.submit(inst, 41, req="r000001")
    cluster.pump()
    rt = cluster.runtimes[0]
    pos = rt.write_checkpoint(cluster.now)
    assert pos == rt.durable.log_len
    assert cluster.store.checkpoint_positions(0)[-1] == pos

    cluster.crash(0)
    cluster.boot(0)
    rt = cluster.runtimes[0]
    assert rt.durable.log_len >= pos
    rec = rt.live.instances[inst.skey]
    assert rec.status == DONE and rec.result == 43


def test_incarnation_bumps_across_restarts_and_rewinds():
    cluster = ManualCluster(seq_registry(), partitions=1, mode="global")
    rt = cluster.runtimes[0]
    assert rt.incarnation == (1, 0)
    rt.rewind(rt.live.log_len - 1)  # no-op cut at the tip still bumps
    assert rt.incarnation == (1, 1)
    cluster.crash(0)
    cluster.boot(0)
    assert cluster.runtimes[0].incarnation == (2, 0)
