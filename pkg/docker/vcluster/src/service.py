from __future__ import annotations

import logging
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass

from apscheduler.schedulers.background import BackgroundScheduler

from .autoscaler import ActionOutcome, RetryPolicy, apply, reconcile
from .cluster import ClusterState
from .errors import IncompatibleMpi
from .events import Clock, Event, EventKind, EventLog, WallClock
from .models import ClusterConfig, JobRecord, JobSpec, JobState, NodeRecord, NodeState, ms_to_seconds
from .providers import PROVIDERS, CloudProfile, CloudProvider, SimProviderConfig, resolve, validate_profile
from .store import ImageRef, MpiRuntime, check_mpi_compat


LOGGER = logging.getLogger("vcluster")


@dataclass(frozen=True)
class JobRequest:
    node_count: int
    tasks_per_node: int
    walltime_limit: int
    image: ImageRef
    command: str = ""
    mpi: MpiRuntime | None = None


class ClusterService:
    """Live cluster on the wall clock.

    Runs the same scheduler and autoscaler code as the simulation. Every
    mutation happens under one lock, whether it comes from the periodic
    reconcile job or from an API request. The lock is released while a
    provider call waits out its retry backoff; only one reconcile pass runs
    at a time.
    """

    def __init__(
        self,
        *,
        config: ClusterConfig,
        profile: CloudProfile,
        provider_config: SimProviderConfig,
        provider_name: str = "simulated",
        retry: RetryPolicy | None = None,
        clock: Clock | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        validate_profile(profile, config)
        provider_cls = PROVIDERS.get(provider_name)
        if provider_cls is None:
            raise ValueError(f"unknown provider '{provider_name}' (known: {', '.join(sorted(PROVIDERS))})")

        self._config = config
        self._request = resolve(config, profile)
        self._retry = retry or RetryPolicy()
        self._sleep = sleep
        self._clock = clock or WallClock()
        self._lock = threading.RLock()
        self._pass_lock = threading.Lock()
        self._cluster = ClusterState(config=config, clock=self._clock, log=EventLog())
        self._provider: CloudProvider = provider_cls(provider_config, clock=self._clock)
        self._provider.subscribe(self._on_active)
        self._job_counter = 0
        self._running = False

        self._scheduler = BackgroundScheduler()
        self._scheduler.add_job(
            self.run_once,
            "interval",
            seconds=ms_to_seconds(config.reconcile_interval),
            max_instances=1,
            coalesce=True,
        )

    @property
    def is_running(self) -> bool:
        return self._running

    @property
    def config(self) -> ClusterConfig:
        return self._config

    def start(self) -> None:
        if self._running:
            return
        self._scheduler.start()
        self._running = True
        LOGGER.info("[VCLUSTER]: reconcile loop started every %.1fs", ms_to_seconds(self._config.reconcile_interval))

    def stop(self) -> None:
        if not self._running:
            return
        self._scheduler.shutdown(wait=False)
        self._running = False

    def _on_active(self, instance_id: str, at: int) -> None:
        node = self._cluster.node_for_instance(instance_id)
        if node is not None and node.state == NodeState.PROVISIONING:
            self._cluster.transition(node.node_id, NodeState.IDLE)
            LOGGER.info("[VCLUSTER]: node %s (%s) is active", node.node_id, instance_id)

    def _sleep_unlocked(self, seconds: float) -> None:
        # Nodes mid-retry are Requested or Terminating; the scheduler never allocates them.
        self._lock.release()
        try:
            self._sleep(seconds)
        finally:
            self._lock.acquire()

    def _enforce_walltimes(self, now: int) -> list[str]:
        expired: list[str] = []
        for job_id in sorted(self._cluster.queue.running):
            job = self._cluster.jobs[job_id]
            if now - int(job.start_time or 0) >= job.spec.walltime_limit:
                self._cluster.finish(job_id, JobState.TIMED_OUT)
                LOGGER.warning(
                    "[VCLUSTER]: %s exceeded its walltime of %.0fs", job_id, ms_to_seconds(job.spec.walltime_limit)
                )
                expired.append(job_id)
        return expired

    def run_once(self) -> list[ActionOutcome]:
        if not self._pass_lock.acquire(blocking=False):
            LOGGER.debug("[VCLUSTER]: reconcile pass already in progress")
            return []
        try:
            with self._lock:
                return self._reconcile_pass()
        except Exception:
            LOGGER.warning("[VCLUSTER]: reconcile pass failed", exc_info=True)
            return []
        finally:
            self._pass_lock.release()

    def _reconcile_pass(self) -> list[ActionOutcome]:
        now = self._clock.now()
        self._provider.advance(now)
        self._cluster.schedule()
        if self._enforce_walltimes(now):
            self._cluster.schedule()

        demand = self._cluster.demand()
        actions = reconcile(self._cluster.snapshot(), demand, self._config, now)
        if not actions:
            return []
        self._cluster.log.append(
            now,
            EventKind.RECONCILE_RAN,
            demand=demand,
            live=self._cluster.live_count(),
            actions=",".join(action.kind.value for action in actions),
        )
        outcomes = apply(
            actions,
            cluster=self._cluster,
            provider=self._provider,
            request=self._request,
            retry=self._retry,
            sleep=self._sleep_unlocked,
        )
        self._cluster.schedule()
        return outcomes

    def submit(self, job: JobRequest) -> JobRecord:
        container_mpi = job.mpi or self._config.host_mpi
        compat = check_mpi_compat(self._config.host_mpi, container_mpi, max_major_skew=self._config.mpi_major_skew)
        if not compat:
            raise IncompatibleMpi(compat.reason, context="job submission")

        with self._lock:
            self._job_counter += 1
            spec = JobSpec(
                job_id=f"job-{self._job_counter:04d}",
                node_count=job.node_count,
                tasks_per_node=job.tasks_per_node,
                walltime_limit=job.walltime_limit,
                image=job.image,
                command=job.command,
                submit_time=self._clock.now(),
            )
            try:
                self._cluster.submit(spec)
            except Exception:
                self._job_counter -= 1
                raise
            self._cluster.schedule()
            LOGGER.info("[VCLUSTER]: queued %s needing %d nodes", spec.job_id, spec.node_count)
            return self._cluster.jobs[spec.job_id]

    def finish(self, job_id: str, outcome: JobState) -> JobRecord:
        with self._lock:
            record = self._cluster.finish(job_id, outcome)
            self._cluster.schedule()
            return record

    def jobs(self) -> list[JobRecord]:
        with self._lock:
            return [self._cluster.jobs[job_id] for job_id in sorted(self._cluster.jobs)]

    def nodes(self, *, include_terminated: bool = False) -> list[NodeRecord]:
        with self._lock:
            if include_terminated:
                return self._cluster.all_nodes()
            return [self._cluster.nodes[node_id] for node_id in sorted(self._cluster.nodes)]

    def events(self) -> tuple[Event, ...]:
        with self._lock:
            return self._cluster.log.events

    def live_count(self) -> int:
        with self._lock:
            return self._cluster.live_count()
