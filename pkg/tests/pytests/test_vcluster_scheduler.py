from __future__ import annotations

import importlib
import random

import pytest


models = importlib.import_module("src.models")
scheduler = importlib.import_module("src.scheduler")
events = importlib.import_module("src.events")
errors = importlib.import_module("src.errors")
store = importlib.import_module("src.store")

NodeState = models.NodeState
JobState = models.JobState
EventKind = events.EventKind

PINNED_IMAGE = "hub/hpl@sha256:" + "a" * 64


def _spec(job_id: str, node_count: int, *, submit_time: int = 0, image: str = "hub/hpl:latest"):
    return models.JobSpec(
        job_id=job_id,
        node_count=node_count,
        tasks_per_node=4,
        walltime_limit=600_000,
        image=store.ImageRef.parse(image),
        submit_time=submit_time,
    )


def _node(index: int, state: NodeState = NodeState.IDLE, *, idle_since: int | None = 0):
    return models.NodeRecord(
        node_id=f"node-{index:05d}",
        flavor="m1.quad",
        image="centos7-hpc",
        state=state,
        instance_id=f"sim-{index}",
        idle_since=idle_since if state == NodeState.IDLE else None,
    )


def _nodes(*records) -> dict:
    return {record.node_id: record for record in records}


def _submit_all(*specs, max_nodes: int = 4, log=None):
    queue = scheduler.QueueState()
    jobs: dict = {}
    for spec in specs:
        scheduler.submit(spec, queue, jobs, max_nodes=max_nodes, log=log)
    return queue, jobs


def test_queue_orders_by_submit_time_then_job_id() -> None:
    queue, _ = _submit_all(
        _spec("job-2", 1, submit_time=5),
        _spec("job-1", 1, submit_time=5),
        _spec("job-0", 1, submit_time=10),
    )
    assert queue.pending == ["job-1", "job-2", "job-0"]


def test_head_of_line_job_blocks_smaller_jobs_behind_it() -> None:
    queue, jobs = _submit_all(
        _spec("job-a", 2, submit_time=0),
        _spec("job-b", 2, submit_time=1),
        _spec("job-c", 1, submit_time=2),
    )
    nodes = _nodes(_node(1), _node(2), _node(3))

    assignments = scheduler.try_schedule(queue, jobs, nodes, 100)

    assert [item.job_id for item in assignments] == ["job-a"]
    assert queue.pending == ["job-b", "job-c"]
    assert jobs["job-c"].state == JobState.PENDING
    assert sum(1 for node in nodes.values() if node.state == NodeState.IDLE) == 1


def test_longest_idle_nodes_are_chosen_first() -> None:
    queue, jobs = _submit_all(_spec("job-a", 2))
    nodes = _nodes(_node(1, idle_since=30), _node(2, idle_since=10), _node(3, idle_since=20))

    (assignment,) = scheduler.try_schedule(queue, jobs, nodes, 100)

    assert assignment.node_ids == ("node-00002", "node-00003")
    assert nodes["node-00001"].state == NodeState.IDLE
    assert nodes["node-00002"].job_id == "job-a"


def test_start_records_state_and_events() -> None:
    log = events.EventLog()
    queue, jobs = _submit_all(_spec("job-a", 2, image=PINNED_IMAGE), log=log)
    nodes = _nodes(_node(1), _node(2))

    scheduler.try_schedule(queue, jobs, nodes, 50, log=log)

    record = jobs["job-a"]
    assert record.state == JobState.RUNNING
    assert record.start_time == 50
    assert record.assigned_nodes == frozenset({"node-00001", "node-00002"})
    assert queue.running == {"job-a"}
    kinds = [event.kind for event in log.events]
    assert kinds == [
        EventKind.JOB_SUBMITTED,
        EventKind.NODE_ALLOCATED,
        EventKind.NODE_ALLOCATED,
        EventKind.JOB_STARTED,
    ]
    assert log.events[-1].payload["nodes"] == "node-00001,node-00002"


def test_unpinned_image_is_flagged_at_submit() -> None:
    log = events.EventLog()
    _submit_all(_spec("job-a", 1), log=log)
    assert [event.kind for event in log.events] == [EventKind.JOB_SUBMITTED, EventKind.IMAGE_UNPINNED]


def test_job_larger_than_cluster_is_rejected() -> None:
    queue = scheduler.QueueState()
    jobs: dict = {}
    with pytest.raises(errors.JobTooLarge) as excinfo:
        scheduler.submit(_spec("job-a", 5), queue, jobs, max_nodes=4)
    assert excinfo.value.node_count == 5
    assert jobs == {}
    assert queue.pending == []


def test_invalid_and_duplicate_jobs_are_rejected() -> None:
    queue, jobs = _submit_all(_spec("job-a", 1))
    with pytest.raises(errors.ConfigValidationError):
        scheduler.submit(_spec("job-a", 1), queue, jobs, max_nodes=4)
    with pytest.raises(errors.ConfigValidationError):
        scheduler.submit(_spec("job-b", 0), queue, jobs, max_nodes=4)


def test_finish_returns_nodes_to_idle() -> None:
    log = events.EventLog()
    queue, jobs = _submit_all(_spec("job-a", 2), log=log)
    nodes = _nodes(_node(1), _node(2))
    scheduler.try_schedule(queue, jobs, nodes, 10, log=log)

    finished = scheduler.finish("job-a", JobState.TIMED_OUT, queue, jobs, nodes, 700, log=log)

    assert finished.state == JobState.TIMED_OUT
    assert finished.end_time == 700
    assert finished.assigned_nodes == frozenset()
    assert all(node.state == NodeState.IDLE and node.idle_since == 700 for node in nodes.values())
    assert queue.running == set()
    assert log.events[-1].kind == EventKind.JOB_ENDED
    assert log.events[-1].payload["state"] == "TimedOut"


def test_finish_errors() -> None:
    queue, jobs = _submit_all(_spec("job-a", 1))
    nodes: dict = {}

    with pytest.raises(errors.UnknownJob):
        scheduler.finish("job-zzz", JobState.COMPLETED, queue, jobs, nodes, 0)
    with pytest.raises(errors.NotRunning):
        scheduler.finish("job-a", JobState.COMPLETED, queue, jobs, nodes, 0)
    with pytest.raises(ValueError):
        scheduler.finish("job-a", JobState.RUNNING, queue, jobs, nodes, 0)


def test_demand_is_capped_need_minus_supply() -> None:
    queue, jobs = _submit_all(_spec("job-a", 3), _spec("job-b", 3), max_nodes=4)
    nodes = _nodes(
        _node(1),
        _node(2, NodeState.PROVISIONING),
        _node(3, NodeState.ALLOCATED),
    )
    assert scheduler.pending_need(queue, jobs) == 6
    assert scheduler.demand(queue, jobs, nodes, max_nodes=4) == 2
    assert scheduler.demand(scheduler.QueueState(), {}, nodes, max_nodes=4) == 0


def _fifo_oracle(waiting: dict, nodes: dict) -> list[tuple[str, tuple[str, ...]]]:
    """Start jobs from the head of the queue while enough Idle nodes remain."""
    idle = sorted(
        (node for node in nodes.values() if node.state == NodeState.IDLE),
        key=lambda node: (node.idle_since, node.node_id),
    )
    started = []
    for spec in sorted(waiting.values(), key=lambda spec: (spec.submit_time, spec.job_id)):
        if spec.node_count > len(idle):
            break
        chosen, idle = idle[: spec.node_count], idle[spec.node_count :]
        started.append((spec.job_id, tuple(sorted(node.node_id for node in chosen))))
    return started


def test_random_queues_start_in_fifo_order() -> None:
    for seed in range(100):
        rng = random.Random(seed)
        max_nodes = rng.randint(1, 8)
        specs = [
            _spec(f"job-{index:04d}", rng.randint(1, max_nodes), submit_time=rng.randint(0, 5) * 1_000)
            for index in range(rng.randint(1, 15))
        ]
        rng.shuffle(specs)
        queue, jobs = _submit_all(*specs, max_nodes=max_nodes)
        waiting = {spec.job_id: spec for spec in specs}

        counter = 0
        nodes: dict = {}
        for _ in range(rng.randint(0, max_nodes)):
            counter += 1
            nodes.update(_nodes(_node(counter, idle_since=rng.randint(0, 3) * 1_000)))

        now = 10_000
        for _ in range(60):
            expected = _fifo_oracle(waiting, nodes)
            assignments = scheduler.try_schedule(queue, jobs, nodes, now)
            assert [(item.job_id, item.node_ids) for item in assignments] == expected, seed
            for item in assignments:
                del waiting[item.job_id]

            for job_id in sorted(queue.running):
                if rng.random() < 0.4:
                    scheduler.finish(job_id, JobState.COMPLETED, queue, jobs, nodes, now)
            if len(nodes) < max_nodes and rng.random() < 0.3:
                counter += 1
                nodes.update(_nodes(_node(counter, idle_since=now)))
            now += 1_000

        assert list(queue.pending) == [
            spec.job_id for spec in sorted(waiting.values(), key=lambda spec: (spec.submit_time, spec.job_id))
        ]


def test_demand_never_rises_as_idle_supply_grows() -> None:
    states = [NodeState.IDLE, NodeState.PROVISIONING, NodeState.REQUESTED, NodeState.ALLOCATED, NodeState.DRAINING]
    for seed in range(200):
        rng = random.Random(seed)
        max_nodes = rng.randint(1, 10)
        specs = [_spec(f"job-{index:04d}", rng.randint(1, max_nodes)) for index in range(rng.randint(0, 6))]
        queue, jobs = _submit_all(*specs, max_nodes=max_nodes)
        nodes = _nodes(*(_node(index, rng.choice(states)) for index in range(1, rng.randint(1, max_nodes) + 1)))

        previous = scheduler.demand(queue, jobs, nodes, max_nodes)
        for extra in range(len(nodes) + 1, len(nodes) + 6):
            nodes.update(_nodes(_node(extra)))
            current = scheduler.demand(queue, jobs, nodes, max_nodes)
            assert 0 <= current <= previous, seed
            previous = current
