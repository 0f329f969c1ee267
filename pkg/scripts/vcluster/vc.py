#!/usr/bin/env python3
"""vcluster command line.

Two files describe a cluster: the cluster config and the cloud profile.
`deploy` checks them and prints what would be provisioned, `simulate` runs
a workload trace against the simulated provider, and the remaining
subcommands cover job submission, HPL tooling and the derivation store.

Exit status: 0 on success, 1 on usage or validation errors, 2 on runtime
errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import requests
from dotenv import dotenv_values

REPO_ROOT = Path(__file__).resolve().parents[2]
VCLUSTER_ROOT = REPO_ROOT / "docker" / "vcluster"
CONFIG_DIR = VCLUSTER_ROOT / "config"

# Make the orchestrator package importable when running as a script.
if str(VCLUSTER_ROOT) not in sys.path:
    sys.path.append(str(VCLUSTER_ROOT))

from src.config import (
    load_cluster_config,
    load_derivation,
    load_profile,
    load_provider_config,
    load_registry,
    read_trace_rows,
)
from src.errors import ConfigValidationError, IncompatibleMpi, VClusterError
from src.events import read_event_log, replay
from src.hpl import (
    DEFAULT_MEM_FRACTION,
    DEFAULT_NB,
    best_result,
    build_hybrid_command,
    efficiency,
    generate_hpl_input,
    parse_hpl_output,
    rmax_for,
)
from src.models import JobRecord, JobSpec, JobState, NodeRecord, NodeState, ms_to_seconds, seconds_to_ms
from src.providers import headnode_request, resolve, validate_profile
from src.simulation import TraceEntry, append_trace_entry, load_trace, run_simulation
from src.store import (
    DerivationStore,
    ImageRef,
    MpiRuntime,
    check_mpi_compat,
    compose_env,
    hash_derivation,
    pin_image,
    realize,
    render_manifest,
)


LOGGER = logging.getLogger("vcluster")

BYTES_PER_GB = 1_000_000_000
DEFAULT_STORE_DB = str(REPO_ROOT / ".vcluster" / "store.db")
REQUEST_TIMEOUT_SECONDS = 10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _env(key: str) -> str | None:
    """Process environment first, then the repo-root `.env`."""
    value = os.getenv(key)
    if value:
        return value
    dotenv_path = REPO_ROOT / ".env"
    if dotenv_path.exists():
        value = dotenv_values(dotenv_path).get(key)
    return value or None


def _path_arg(value: str | None, env_key: str, *, parser: argparse.ArgumentParser, flag: str) -> Path:
    resolved = value or _env(env_key)
    if not resolved:
        parser.error(f"{flag} is required (or set {env_key})")
    path = Path(str(resolved))
    if not path.exists():
        raise ConfigValidationError(context=flag, problems=[f"file not found: {path}"])
    return path


# ---------------------------------------------------------------------------
# deploy
# ---------------------------------------------------------------------------


def cmd_deploy(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    config = load_cluster_config(_path_arg(args.config, "VC_CONFIG", parser=parser, flag="--config"))
    profile = load_profile(_path_arg(args.profile, "VC_PROFILE", parser=parser, flag="--profile"))
    validate_profile(profile, config)

    rendered = {
        "cluster": config.name,
        "profile": profile.name,
        "max_nodes": config.max_nodes,
        "min_nodes": config.min_nodes,
        "storage": asdict(config.storage),
        "headnode": headnode_request(config, profile).as_dict(),
        "worker": resolve(config, profile).as_dict(),
    }
    print(json.dumps(rendered, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# submit / status
# ---------------------------------------------------------------------------


def cmd_submit(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if bool(args.trace) == bool(args.url):
        parser.error("exactly one of --trace or --url is required")

    image = ImageRef.parse(args.image)
    mpi = MpiRuntime.parse(args.mpi) if args.mpi else None

    if args.url:
        payload = {
            "node_count": args.nodes,
            "tasks_per_node": args.tasks_per_node,
            "walltime_limit": args.walltime,
            "image": str(image),
            "command": args.command or "",
        }
        if mpi is not None:
            payload["mpi"] = str(mpi)
        response = requests.post(f"{args.url.rstrip('/')}/api/jobs", json=payload, timeout=REQUEST_TIMEOUT_SECONDS)
        body = response.json() if response.content else {}
        if response.status_code == 400:
            raise ConfigValidationError(context="submit", problems=[str(body.get("error") or response.text)])
        response.raise_for_status()
        print(body["job"]["job_id"])
        return 0

    trace_path = Path(args.trace)
    submit_time = args.submit_time
    if submit_time is None:
        rows = read_trace_rows(trace_path)
        submit_time = float(rows[-1]["submit_time"]) if rows else 0.0
    entry = TraceEntry(
        submit_time=seconds_to_ms(submit_time),
        node_count=args.nodes,
        tasks_per_node=args.tasks_per_node,
        duration=seconds_to_ms(args.duration if args.duration is not None else args.walltime),
        walltime_limit=seconds_to_ms(args.walltime),
        image=image,
        mpi=mpi,
        command=args.command or "",
    )
    if min(entry.node_count, entry.tasks_per_node, entry.duration, entry.walltime_limit) <= 0:
        raise ConfigValidationError(context="submit", problems=["counts and durations must be positive"])
    append_trace_entry(trace_path, entry)
    print(f"appended to {trace_path}")
    return 0


def _seconds(value: int | None) -> str:
    return "-" if value is None else f"{ms_to_seconds(value):.1f}"


def render_status(jobs: list[JobRecord], nodes: list[NodeRecord]) -> str:
    lines = ["JOBS", f"{'JOB':<10} {'STATE':<10} {'NODES':>5} {'SUBMIT_S':>9} {'START_S':>9} {'END_S':>9}"]
    for record in jobs:
        lines.append(
            f"{record.job_id:<10} {record.state.value:<10} {record.spec.node_count:>5} "
            f"{_seconds(record.spec.submit_time):>9} {_seconds(record.start_time):>9} {_seconds(record.end_time):>9}"
        )
    lines.append("")
    lines.append("NODES")
    lines.append(f"{'NODE':<11} {'STATE':<13} {'INSTANCE':<10} {'JOB':<10}")
    for node in nodes:
        lines.append(f"{node.node_id:<11} {node.state.value:<13} {node.instance_id or '-':<10} {node.job_id or '-':<10}")
    return "\n".join(lines) + "\n"


def _records_from_api(url: str) -> tuple[list[JobRecord], list[NodeRecord]]:
    base = url.rstrip("/")
    jobs_response = requests.get(f"{base}/api/jobs", timeout=REQUEST_TIMEOUT_SECONDS)
    jobs_response.raise_for_status()
    nodes_response = requests.get(f"{base}/api/nodes", params={"all": "true"}, timeout=REQUEST_TIMEOUT_SECONDS)
    nodes_response.raise_for_status()

    def ms(value: float | None) -> int | None:
        return None if value is None else seconds_to_ms(value)

    jobs = [
        JobRecord(
            spec=JobSpec(
                job_id=item["job_id"],
                node_count=int(item["node_count"]),
                tasks_per_node=int(item["tasks_per_node"]),
                walltime_limit=seconds_to_ms(item["walltime_limit"]),
                image=ImageRef.parse(item["image"]),
                command=item.get("command") or "",
                submit_time=seconds_to_ms(item["submit_time"]),
            ),
            state=JobState(item["state"]),
            assigned_nodes=frozenset(item.get("assigned_nodes") or []),
            start_time=ms(item.get("start_time")),
            end_time=ms(item.get("end_time")),
        )
        for item in jobs_response.json()
    ]
    nodes = [
        NodeRecord(
            node_id=item["node_id"],
            flavor=item.get("flavor") or "",
            image=item.get("image") or "",
            state=NodeState(item["state"]),
            instance_id=item.get("instance_id"),
            job_id=item.get("job_id"),
        )
        for item in nodes_response.json()
    ]
    return jobs, nodes


def cmd_status(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if bool(args.events) == bool(args.url):
        parser.error("exactly one of --events or --url is required")
    if args.url:
        jobs, nodes = _records_from_api(args.url)
    else:
        job_map, node_map = replay(read_event_log(Path(args.events)))
        jobs = [job_map[job_id] for job_id in sorted(job_map)]
        nodes = [node_map[node_id] for node_id in sorted(node_map)]
    sys.stdout.write(render_status(jobs, nodes))
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    config_path = _path_arg(args.config, "VC_CONFIG", parser=parser, flag="--config")
    profile_path = _path_arg(args.profile, "VC_PROFILE", parser=parser, flag="--profile")
    trace_path = _path_arg(args.trace, "VC_TRACE", parser=parser, flag="--trace")
    provider_value = args.provider_config or _env("VC_PROVIDER_CONFIG")

    config = load_cluster_config(config_path)
    profile = load_profile(profile_path)
    provider_config, retry = load_provider_config(Path(provider_value) if provider_value else None)
    if args.seed is not None:
        provider_config = replace(provider_config, seed=args.seed)
    trace = load_trace(trace_path)

    report = run_simulation(config, profile, provider_config, trace, retry=retry)

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "events.log").write_bytes(report.event_log.encode("utf-8"))
        (out_dir / "report.txt").write_text(report.render_text(), encoding="utf-8")
        (out_dir / "report.jsonl").write_text(report.render_records(), encoding="utf-8")
        LOGGER.info("[SIM]: wrote events.log, report.txt and report.jsonl to %s", out_dir)

    sys.stdout.write(report.render_text())
    return 0 if report.leak_check else 2


# ---------------------------------------------------------------------------
# HPL
# ---------------------------------------------------------------------------


def _hpl_shape(args: argparse.Namespace, parser: argparse.ArgumentParser) -> tuple[int, int, int]:
    """Nodes, cores per node and memory bytes; explicit flags win over --config."""
    nodes, cores, mem_bytes = args.nodes, args.cores, None
    if args.mem_gb is not None:
        mem_bytes = int(round(args.mem_gb * BYTES_PER_GB))
    if args.config:
        cluster = load_cluster_config(_path_arg(args.config, "VC_CONFIG", parser=parser, flag="--config"))
        nodes = cluster.max_nodes if nodes is None else nodes
        cores = cluster.cores_per_node if cores is None else cores
        mem_bytes = cluster.mem_per_node_bytes if mem_bytes is None else mem_bytes

    missing = [flag for flag, value in (("--nodes", nodes), ("--cores", cores), ("--mem-gb", mem_bytes)) if value is None]
    if missing:
        parser.error(f"{', '.join(missing)} required without --config")
    return nodes, cores, mem_bytes


def cmd_hpl_gen(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    nodes, cores, mem_bytes = _hpl_shape(args, parser)
    config, text = generate_hpl_input(nodes, cores, mem_bytes, args.fraction, args.nb)

    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"N={config.n} NB={config.nb} P={config.p} Q={config.q} -> {args.out}")
    else:
        sys.stdout.write(text)

    if args.image:
        # A bare .sif file is launched as given; a registry reference becomes <name>.sif.
        is_local_file = args.image.endswith(".sif")
        image_ref = ImageRef("local", Path(args.image).stem) if is_local_file else ImageRef.parse(args.image)
        job = JobSpec(
            job_id="hpl",
            node_count=nodes,
            tasks_per_node=args.tasks_per_node or cores,
            walltime_limit=1,
            image=image_ref,
        )
        input_name = Path(args.out).name if args.out else "HPL.dat"
        print(build_hybrid_command(job, args.image if is_local_file else image_ref, input_name))
    return 0


def cmd_hpl_report(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if bool(args.output) == (args.gflops is not None):
        parser.error("give either an HPL output file or --gflops")
    if args.rmax is not None:
        rmax = args.rmax
    elif args.config and args.nodes is not None:
        cluster = load_cluster_config(_path_arg(args.config, "VC_CONFIG", parser=parser, flag="--config"))
        rmax = rmax_for(args.nodes, cluster.rmax_per_node_gflops)
    else:
        parser.error("give --rmax, or --config with --nodes")

    if args.gflops is not None:
        gflops = args.gflops
    else:
        results = parse_hpl_output(Path(args.output).read_text(encoding="utf-8"))
        best = best_result(results)
        if best is None:
            raise ConfigValidationError(context=str(args.output), problems=["no result rows found"])
        print(f"best: {best.variant} N={best.n} NB={best.nb} P={best.p} Q={best.q} time={best.time_s:.2f}s")
        gflops = best.gflops

    report = efficiency(gflops, rmax)
    print(
        f"gflops={report.gflops:.4g} rmax={report.rmax_gflops:.4g} ratio={report.ratio:.4f} "
        f"in_reference_band={'yes' if report.in_reference_band else 'no'}"
    )
    return 0


# ---------------------------------------------------------------------------
# Store and images
# ---------------------------------------------------------------------------


def _store(args: argparse.Namespace) -> DerivationStore:
    return DerivationStore(args.store or _env("VC_STORE_DB") or DEFAULT_STORE_DB)


def cmd_hash(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    print(hash_derivation(load_derivation(Path(args.derivation))))
    return 0


def cmd_realize(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    store = _store(args)
    for path in args.derivations:
        entry = realize(load_derivation(Path(path)), store)
        print(f"{entry.digest}  {entry.name}")
    return 0


def cmd_env(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    store = _store(args)
    entries = []
    for digest in args.digests:
        entry = store.get(digest)
        if entry is None:
            raise ConfigValidationError(context="env", problems=[f"{digest} is not in the store"])
        entries.append(entry)
    sys.stdout.write(render_manifest(compose_env(entries, store)))
    return 0


def cmd_pin(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    registry = load_registry(Path(args.registry))
    print(pin_image(ImageRef.parse(args.image), registry))
    return 0


def cmd_mpi_check(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    host = MpiRuntime.parse(args.host)
    container = MpiRuntime.parse(args.container)
    compat = check_mpi_compat(host, container, max_major_skew=args.max_skew)
    if not compat:
        raise IncompatibleMpi(compat.reason, context=f"{host} host, {container} container")
    print(f"compatible: {host} host, {container} container")
    return 0


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vc", description="Elastic virtual cluster orchestrator")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("deploy", help="Validate config and profile, print the resolved instance requests")
    p.add_argument("--config", help="Cluster config YAML (default: $VC_CONFIG)")
    p.add_argument("--profile", help="Cloud profile YAML (default: $VC_PROFILE)")
    p.set_defaults(handler=cmd_deploy, subparser=p)

    p = sub.add_parser("submit", help="Append a job to a trace or submit it to a live service")
    p.add_argument("--trace", help="Trace CSV to append to")
    p.add_argument("--url", help="Base URL of a running vcluster service")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--tasks-per-node", type=int, default=1)
    p.add_argument("--walltime", type=float, required=True, help="Walltime limit in seconds")
    p.add_argument("--duration", type=float, help="Simulated run length in seconds (trace only)")
    p.add_argument("--submit-time", type=float, help="Submit time in seconds (trace only)")
    p.add_argument("--image", required=True)
    p.add_argument("--mpi", help="Container MPI runtime, e.g. 'OpenMPI 4.0.1'")
    p.add_argument("--command", default="")
    p.set_defaults(handler=cmd_submit, subparser=p)

    p = sub.add_parser("status", help="Render the job and node tables")
    p.add_argument("--events", help="Event log written by simulate --out")
    p.add_argument("--url", help="Base URL of a running vcluster service")
    p.set_defaults(handler=cmd_status, subparser=p)

    p = sub.add_parser("simulate", help="Run a workload trace against the simulated provider")
    p.add_argument("--config", help="Cluster config YAML (default: $VC_CONFIG)")
    p.add_argument("--profile", help="Cloud profile YAML (default: $VC_PROFILE)")
    p.add_argument("--trace", help="Workload trace CSV (default: $VC_TRACE)")
    p.add_argument("--provider-config", help="Simulated provider YAML (default: $VC_PROVIDER_CONFIG)")
    p.add_argument("--seed", type=int, help="Override the provider seed")
    p.add_argument("--out", help="Directory for events.log, report.txt and report.jsonl")
    p.set_defaults(handler=cmd_simulate, subparser=p)

    p = sub.add_parser("hpl-gen", help="Generate HPL.dat for a cluster shape")
    p.add_argument("--config", help="Cluster config YAML; supplies nodes (max_nodes), cores and memory")
    p.add_argument("--nodes", type=int)
    p.add_argument("--cores", type=int, help="Cores per node")
    p.add_argument("--mem-gb", type=float, help="Memory per node in GB")
    p.add_argument("--fraction", type=float, default=DEFAULT_MEM_FRACTION)
    p.add_argument("--nb", type=int, default=DEFAULT_NB)
    p.add_argument("--image", help="Image reference or .sif file; prints the launch command")
    p.add_argument("--tasks-per-node", type=int, help="Ranks per node for the launch command (default: --cores)")
    p.add_argument("--out", help="Write HPL.dat here instead of stdout")
    p.set_defaults(handler=cmd_hpl_gen, subparser=p)

    p = sub.add_parser("hpl-report", help="Compute HPL efficiency against Rmax")
    p.add_argument("output", nargs="?", help="HPL output file")
    p.add_argument("--gflops", type=float, help="Measured GFLOPS instead of an output file")
    p.add_argument("--rmax", type=float, help="Theoretical peak in GFLOPS")
    p.add_argument("--config", help="Cluster config YAML; Rmax is --nodes x rmax_per_node_gflops")
    p.add_argument("--nodes", type=int, help="Nodes the benchmark ran on (with --config)")
    p.set_defaults(handler=cmd_hpl_report, subparser=p)

    p = sub.add_parser("hash", help="Print the digest of a derivation file")
    p.add_argument("derivation")
    p.set_defaults(handler=cmd_hash, subparser=p)

    p = sub.add_parser("realize", help="Realize derivations into the store")
    p.add_argument("derivations", nargs="+")
    p.add_argument("--store", help="Store database (default: $VC_STORE_DB)")
    p.set_defaults(handler=cmd_realize, subparser=p)

    p = sub.add_parser("env", help="Compose an environment manifest from store digests")
    p.add_argument("digests", nargs="+")
    p.add_argument("--store", help="Store database (default: $VC_STORE_DB)")
    p.set_defaults(handler=cmd_env, subparser=p)

    p = sub.add_parser("pin", help="Pin an image reference to a registry digest")
    p.add_argument("image")
    p.add_argument("--registry", default=str(CONFIG_DIR / "registry.yml"))
    p.set_defaults(handler=cmd_pin, subparser=p)

    p = sub.add_parser("mpi-check", help="Check host and container MPI compatibility")
    p.add_argument("--host", required=True)
    p.add_argument("--container", required=True)
    p.add_argument("--max-skew", type=int, default=1)
    p.set_defaults(handler=cmd_mpi_check, subparser=p)

    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    log_level = str(_env("VC_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(level=getattr(logging, log_level, logging.INFO))

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.handler(args, args.subparser))
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigValidationError as exc:
        print(exc.format(), file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VClusterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except requests.RequestException as exc:
        print(f"error: service request failed: {exc}", file=sys.stderr)
        return 2


def main(argv: list[str] | None = None) -> None:
    raise SystemExit(cli_dispatch(argv))


if __name__ == "__main__":
    main()
