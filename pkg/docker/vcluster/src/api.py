from __future__ import annotations

from flask import Blueprint, jsonify, request

from .errors import ConfigValidationError, NotRunning, UnknownJob
from .models import TERMINAL_JOB_STATES, JobRecord, JobState, NodeRecord, ms_to_seconds, seconds_to_ms
from .service import ClusterService, JobRequest
from .store import DerivationStore, ImageRef, MpiRuntime


def _positive_int(payload: dict, key: str, *, default: int | None = None) -> int:
    raw = payload.get(key, default)
    if isinstance(raw, bool) or not isinstance(raw, int) or raw < 1:
        raise ValueError(f"{key} must be a positive integer")
    return raw


def _parse_job_payload(payload: dict) -> JobRequest:
    image = str(payload.get("image") or "").strip()
    if not image:
        raise ValueError("image is required")

    walltime = payload.get("walltime_limit")
    if isinstance(walltime, bool) or not isinstance(walltime, (int, float)) or walltime <= 0:
        raise ValueError("walltime_limit must be a positive number of seconds")

    mpi = str(payload.get("mpi") or "").strip()
    return JobRequest(
        node_count=_positive_int(payload, "node_count"),
        tasks_per_node=_positive_int(payload, "tasks_per_node", default=1),
        walltime_limit=seconds_to_ms(walltime),
        image=ImageRef.parse(image),
        command=str(payload.get("command") or ""),
        mpi=MpiRuntime.parse(mpi) if mpi else None,
    )


def job_to_dict(record: JobRecord) -> dict:
    spec = record.spec
    return {
        "job_id": record.job_id,
        "state": record.state.value,
        "node_count": spec.node_count,
        "tasks_per_node": spec.tasks_per_node,
        "walltime_limit": ms_to_seconds(spec.walltime_limit),
        "image": str(spec.image),
        "command": spec.command,
        "assigned_nodes": sorted(record.assigned_nodes),
        "submit_time": ms_to_seconds(spec.submit_time),
        "start_time": ms_to_seconds(record.start_time) if record.start_time is not None else None,
        "end_time": ms_to_seconds(record.end_time) if record.end_time is not None else None,
    }


def node_to_dict(node: NodeRecord) -> dict:
    return {
        "node_id": node.node_id,
        "state": node.state.value,
        "flavor": node.flavor,
        "image": node.image,
        "instance_id": node.instance_id,
        "job_id": node.job_id,
        "created_at": ms_to_seconds(node.created_at),
        "idle_since": ms_to_seconds(node.idle_since) if node.idle_since is not None else None,
    }


def create_api_blueprint(*, service: ClusterService, store: DerivationStore | None = None) -> Blueprint:
    blueprint = Blueprint("vcluster_api", __name__)

    @blueprint.post("/jobs")
    def submit_job() -> tuple:
        payload = request.get_json(silent=True) or {}
        try:
            job = _parse_job_payload(payload)
            record = service.submit(job)
        except ConfigValidationError as exc:
            return jsonify({"error": str(exc), "problems": exc.problems}), 400
        except ValueError as exc:
            return jsonify({"error": str(exc)}), 400
        return jsonify({"status": "ok", "job": job_to_dict(record)}), 201

    @blueprint.get("/jobs")
    def list_jobs() -> tuple:
        state_filter = str(request.args.get("state") or "").strip()
        jobs = service.jobs()
        if state_filter:
            jobs = [record for record in jobs if record.state.value == state_filter]
        return jsonify([job_to_dict(record) for record in jobs]), 200

    @blueprint.post("/jobs/<job_id>/finish")
    def finish_job(job_id: str) -> tuple:
        payload = request.get_json(silent=True) or {}
        try:
            outcome = JobState(str(payload.get("state") or JobState.COMPLETED.value))
        except ValueError:
            return jsonify({"error": "state must be Completed, Failed or TimedOut"}), 400
        if outcome not in TERMINAL_JOB_STATES:
            return jsonify({"error": "state must be Completed, Failed or TimedOut"}), 400
        try:
            record = service.finish(job_id, outcome)
        except UnknownJob as exc:
            return jsonify({"error": str(exc)}), 404
        except NotRunning as exc:
            return jsonify({"error": str(exc)}), 409
        return jsonify({"status": "ok", "job": job_to_dict(record)}), 200

    @blueprint.get("/nodes")
    def list_nodes() -> tuple:
        include_terminated = str(request.args.get("all") or "").strip().lower() == "true"
        nodes = service.nodes(include_terminated=include_terminated)
        return jsonify([node_to_dict(node) for node in nodes]), 200

    @blueprint.get("/store")
    def list_store() -> tuple:
        if store is None:
            return jsonify([]), 200
        entries = [
            {"digest": entry.digest, "name": entry.name, "refs": sorted(entry.refs)}
            for entry in store.list_entries()
        ]
        return jsonify(entries), 200

    @blueprint.get("/health")
    def health() -> tuple:
        return (
            jsonify(
                {
                    "status": "ok",
                    "scheduler_running": service.is_running,
                    "live_nodes": service.live_count(),
                    "max_nodes": service.config.max_nodes,
                }
            ),
            200,
        )

    return blueprint
