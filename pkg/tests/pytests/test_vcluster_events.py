from __future__ import annotations

import importlib
from dataclasses import replace

import pytest


models = importlib.import_module("src.models")
events = importlib.import_module("src.events")
errors = importlib.import_module("src.errors")

NodeState = models.NodeState
EventKind = events.EventKind


def _node(**kwargs) -> models.NodeRecord:
    return models.NodeRecord(node_id="node-00001", flavor="m1.quad", image="centos7-hpc", **kwargs)


def _single_job_log() -> events.EventLog:
    """One node, one job: provisioned at 0, busy 30s..630s, gone at 930s."""
    log = events.EventLog()
    log.append(
        0,
        EventKind.JOB_SUBMITTED,
        job_id="job-0001",
        node_count=1,
        tasks_per_node=4,
        walltime_ms=1_800_000,
        image="hub/hpl:latest",
        command="xhpl",
    )
    log.append(0, EventKind.NODE_REQUESTED, node_id="node-00001", flavor="m1.quad", image="centos7-hpc")
    node = replace(_node(), instance_id="sim-1")
    node = events.transition_node(node, NodeState.PROVISIONING, 0, log=log)
    node = events.transition_node(node, NodeState.IDLE, 30_000, log=log)
    node = events.transition_node(node, NodeState.ALLOCATED, 30_000, log=log, job_id="job-0001")
    log.append(30_000, EventKind.JOB_STARTED, job_id="job-0001", nodes="node-00001")
    node = events.transition_node(node, NodeState.IDLE, 630_000, log=log)
    log.append(630_000, EventKind.JOB_ENDED, job_id="job-0001", state="Completed")
    node = events.transition_node(node, NodeState.DRAINING, 930_000, log=log)
    node = events.transition_node(node, NodeState.TERMINATING, 930_000, log=log)
    events.transition_node(node, NodeState.TERMINATED, 930_000, log=log)
    return log


def test_node_lifecycle_tracks_timestamps() -> None:
    node = models.apply_transition(_node(), NodeState.PROVISIONING, 0)
    node = models.apply_transition(node, NodeState.IDLE, 30_000)
    assert node.idle_since == 30_000

    node = models.apply_transition(node, NodeState.ALLOCATED, 40_000, job_id="job-0001")
    assert node.job_id == "job-0001"
    assert node.idle_since is None

    node = models.apply_transition(node, NodeState.IDLE, 100_000)
    assert node.job_id is None
    node = models.apply_transition(node, NodeState.DRAINING, 500_000)
    node = models.apply_transition(node, NodeState.TERMINATING, 500_000)
    node = models.apply_transition(node, NodeState.TERMINATED, 501_000)
    assert node.terminated_at == 501_000
    assert node.state_since == 501_000


@pytest.mark.parametrize(
    "start,target",
    [
        (NodeState.REQUESTED, NodeState.IDLE),
        (NodeState.ALLOCATED, NodeState.DRAINING),
        (NodeState.IDLE, NodeState.TERMINATED),
        (NodeState.TERMINATED, NodeState.FAILED),
        (NodeState.FAILED, NodeState.FAILED),
    ],
)
def test_illegal_transitions_are_rejected(start, target) -> None:
    with pytest.raises(errors.IllegalTransition):
        models.apply_transition(_node(state=start), target, 0)


def test_every_unfinished_state_may_fail() -> None:
    for state in NodeState:
        expected = state not in (NodeState.TERMINATED, NodeState.FAILED)
        assert models.is_legal_transition(state, NodeState.FAILED) is expected


def test_event_lines_are_sorted_and_encoded() -> None:
    log = events.EventLog()
    log.append(5, EventKind.JOB_SUBMITTED, job_id="job-0001", command="xhpl -n 4", image="hub/hpl:latest")

    assert log.render() == "1\t5\tJobSubmitted\tcommand=xhpl%20-n%204 image=hub%2Fhpl%3Alatest job_id=job-0001\n"
    assert events.parse_event_log(log.render()) == list(log.events)


def test_log_drops_none_values_and_numbers_sequentially() -> None:
    log = events.EventLog()
    first = log.append(0, EventKind.NODE_REQUESTED, node_id="node-00001", flavor=None)
    second = log.append(0, EventKind.RECONCILE_RAN, demand=0)
    assert first.payload == {"node_id": "node-00001"}
    assert (first.seq, second.seq) == (1, 2)


def test_log_rejects_time_going_backwards() -> None:
    log = events.EventLog()
    log.append(10, EventKind.RECONCILE_RAN)
    with pytest.raises(ValueError):
        log.append(5, EventKind.RECONCILE_RAN)


def test_virtual_clock_only_moves_forward() -> None:
    clock = events.VirtualClock()
    assert clock.advance_to(1_000) == 1_000
    with pytest.raises(ValueError):
        clock.advance_to(999)


def test_parse_rejects_unknown_kinds_and_bad_tokens() -> None:
    with pytest.raises(errors.MalformedLog):
        events.parse_event_log("1\t0\tNodeExploded\t\n")
    with pytest.raises(errors.MalformedLog):
        events.parse_event_log("1\t0\tReconcileRan\tnot-a-pair\n")
    with pytest.raises(errors.MalformedLog):
        events.parse_event_log("1\t0\n")


def test_usage_for_single_job() -> None:
    usage = events.accumulate_usage(_single_job_log().events)

    assert usage.node_seconds_total == pytest.approx(930.0)
    assert usage.node_seconds_busy == pytest.approx(600.0)
    assert usage.utilization == pytest.approx(600.0 / 930.0)
    assert usage.max_concurrent_nodes == 1
    assert usage.per_job_wait == {"job-0001": pytest.approx(30.0)}


def test_usage_of_empty_log_is_zero() -> None:
    usage = events.accumulate_usage([])
    assert usage.node_seconds_total == 0.0
    assert usage.utilization == 0.0
    assert usage.per_job_wait == {}


def test_usage_closes_open_intervals_at_last_event() -> None:
    log = events.EventLog()
    log.append(0, EventKind.NODE_REQUESTED, node_id="node-00001")
    node = events.transition_node(_node(), NodeState.PROVISIONING, 0, log=log)
    node = events.transition_node(node, NodeState.IDLE, 10_000, log=log)
    log.append(50_000, EventKind.RECONCILE_RAN)

    usage = events.accumulate_usage(log.events)
    assert usage.node_seconds_total == pytest.approx(50.0)
    assert usage.node_seconds_busy == 0.0


def test_usage_rejects_illegal_node_history() -> None:
    log = events.EventLog()
    log.append(0, EventKind.NODE_REQUESTED, node_id="node-00001")
    log.append(5, EventKind.NODE_ACTIVE, node_id="node-00001")
    with pytest.raises(errors.MalformedLog):
        events.accumulate_usage(log.events)


def test_usage_rejects_events_for_unknown_nodes() -> None:
    log = events.EventLog()
    log.append(0, EventKind.NODE_PROVISIONING, node_id="node-00009")
    with pytest.raises(errors.MalformedLog):
        events.accumulate_usage(log.events)


def test_usage_rejects_sequence_gaps() -> None:
    good = list(_single_job_log().events)
    with pytest.raises(errors.MalformedLog):
        events.accumulate_usage(good[:3] + good[4:])


def test_scaling_timeline_counts_live_nodes() -> None:
    assert events.scaling_timeline(_single_job_log().events) == [(0, 1), (930_000, 0)]


def test_replay_rebuilds_jobs_and_nodes() -> None:
    log = _single_job_log()
    jobs, nodes = events.replay(events.parse_event_log(log.render()))

    job = jobs["job-0001"]
    assert job.state == models.JobState.COMPLETED
    assert (job.start_time, job.end_time) == (30_000, 630_000)
    assert job.wait_time == 30_000
    assert job.spec.walltime_limit == 1_800_000
    assert str(job.spec.image) == "hub/hpl:latest"

    node = nodes["node-00001"]
    assert node.state == NodeState.TERMINATED
    assert node.instance_id == "sim-1"
    assert node.terminated_at == 930_000
