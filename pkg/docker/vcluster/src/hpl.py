"""HPL input generation, hybrid-model launch command and result parsing.

Sizing follows the usual tuning advice: fill a fraction of aggregate memory
with the N x N double matrix, round N down to a multiple of the block size,
and use the most nearly square P x Q grid with P <= Q.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from fractions import Fraction

from .errors import IncompatibleMpi, Infeasible, NonpositiveRmax, ParseError
from .models import JobSpec
from .store import COMPATIBLE, ImageRef, MpiCompatibility


LOGGER = logging.getLogger("vcluster.hpl")

DEFAULT_NB = 192
DEFAULT_MEM_FRACTION = 0.8
DEFAULT_INPUT_FILENAME = "HPL.dat"
EFFICIENCY_BAND = (0.73, 0.78)
BYTES_PER_DOUBLE = 8

_TV_RE = re.compile(r"^W[RC]\w+$")


@dataclass(frozen=True)
class HplConfig:
    n: int
    nb: int
    p: int
    q: int
    mem_fraction: float | None = DEFAULT_MEM_FRACTION

    @property
    def total_procs(self) -> int:
        return self.p * self.q


@dataclass(frozen=True)
class HplResult:
    n: int
    nb: int
    p: int
    q: int
    time_s: float
    gflops: float
    variant: str = ""


@dataclass(frozen=True)
class EfficiencyReport:
    gflops: float
    rmax_gflops: float
    ratio: float
    in_reference_band: bool


def process_grid(total_procs: int) -> tuple[int, int]:
    if total_procs < 1:
        raise Infeasible(f"total_procs must be >= 1, got {total_procs}")
    p = math.isqrt(total_procs)
    while total_procs % p:
        p -= 1
    return p, total_procs // p


def problem_size(*, nodes: int, mem_per_node_bytes: int, mem_fraction: float, nb: int) -> int:
    budget = Fraction(str(mem_fraction)) * nodes * mem_per_node_bytes / BYTES_PER_DOUBLE
    raw = math.isqrt(math.floor(budget))
    return raw - raw % nb


def generate_hpl_input(
    nodes: int,
    cores_per_node: int,
    mem_per_node_bytes: int,
    mem_fraction: float = DEFAULT_MEM_FRACTION,
    nb: int = DEFAULT_NB,
) -> tuple[HplConfig, str]:
    if min(nodes, cores_per_node, mem_per_node_bytes, nb) <= 0:
        raise Infeasible("nodes, cores_per_node, mem_per_node_bytes and nb must all be positive")
    if not 0 < mem_fraction <= 1:
        raise Infeasible(f"mem_fraction must be within (0, 1], got {mem_fraction}")

    n = problem_size(nodes=nodes, mem_per_node_bytes=mem_per_node_bytes, mem_fraction=mem_fraction, nb=nb)
    if n < nb:
        raise Infeasible(f"memory budget holds no {nb}x{nb} block")

    p, q = process_grid(nodes * cores_per_node)
    config = HplConfig(n=n, nb=nb, p=p, q=q, mem_fraction=mem_fraction)
    return config, render_hpl_dat(config)


def render_hpl_dat(config: HplConfig, *, output_name: str = "HPL.out") -> str:
    rows = [
        ("HPLinpack benchmark input file", None),
        ("Innovative Computing Laboratory, University of Tennessee", None),
        (output_name, "output file name (if any)"),
        ("6", "device out (6=stdout,7=stderr,file)"),
        ("1", "# of problems sizes (N)"),
        (str(config.n), "Ns"),
        ("1", "# of NBs"),
        (str(config.nb), "NBs"),
        ("0", "PMAP process mapping (0=Row-,1=Column-major)"),
        ("1", "# of process grids (P x Q)"),
        (str(config.p), "Ps"),
        (str(config.q), "Qs"),
        ("16.0", "threshold"),
        ("1", "# of panel fact"),
        ("2", "PFACTs (0=left, 1=Crout, 2=Right)"),
        ("1", "# of recursive stopping criterium"),
        ("4", "NBMINs (>= 1)"),
        ("1", "# of panels in recursion"),
        ("2", "NDIVs"),
        ("1", "# of recursive panel fact."),
        ("1", "RFACTs (0=left, 1=Crout, 2=Right)"),
        ("1", "# of broadcast"),
        ("1", "BCASTs (0=1rg,1=1rM,2=2rg,3=2rM,4=Lng,5=LnM)"),
        ("1", "# of lookahead depth"),
        ("1", "DEPTHs (>=0)"),
        ("2", "SWAP (0=bin-exch,1=long,2=mix)"),
        ("64", "swapping threshold"),
        ("0", "L1 in (0=transposed,1=no-transposed) form"),
        ("0", "U  in (0=transposed,1=no-transposed) form"),
        ("1", "Equilibration (0=no,1=yes)"),
        ("8", "memory alignment in double (> 0)"),
    ]
    lines = [value if label is None else f"{value:<13}{label}" for value, label in rows]
    return "\n".join(lines) + "\n"


def parse_hpl_dat(text: str) -> HplConfig:
    lines = text.splitlines()
    if len(lines) < 12:
        raise ParseError(len(lines), "HPL.dat is shorter than the grid section")

    def first_int(line_no: int) -> int:
        tokens = lines[line_no - 1].split()
        try:
            return int(tokens[0])
        except (IndexError, ValueError) as exc:
            raise ParseError(line_no, f"expected an integer, got '{lines[line_no - 1].strip()}'") from exc

    return HplConfig(n=first_int(6), nb=first_int(8), p=first_int(11), q=first_int(12), mem_fraction=None)


def build_hybrid_command(
    job: JobSpec,
    image: ImageRef | str,
    input_filename: str = DEFAULT_INPUT_FILENAME,
    *,
    compat: MpiCompatibility = COMPATIBLE,
) -> str:
    """Host mpirun launches one container process per rank."""
    if not compat.compatible:
        raise IncompatibleMpi(compat.reason, context=f"job {job.job_id}")
    if isinstance(image, ImageRef):
        if not image.pinned:
            LOGGER.warning("[VCLUSTER]: job %s launches unpinned image %s", job.job_id, image)
        image_file = image.local_file
    else:
        image_file = str(image)
    return f"mpirun -np {job.num_procs} singularity exec {image_file} xhpl ./{input_filename}"


def parse_hpl_output(text: str) -> list[HplResult]:
    results: list[HplResult] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens or not _TV_RE.match(tokens[0]):
            continue
        if len(tokens) != 7:
            raise ParseError(line_no, f"expected 7 columns in result row, got {len(tokens)}")
        try:
            n, nb, p, q = (int(token) for token in tokens[1:5])
            time_s = float(tokens[5])
            gflops = float(tokens[6])
        except ValueError as exc:
            raise ParseError(line_no, f"non-numeric field in result row: {exc}") from exc
        if not (math.isfinite(gflops) and gflops > 0 and math.isfinite(time_s) and time_s > 0):
            raise ParseError(line_no, "Time and Gflops must be positive")
        results.append(HplResult(n=n, nb=nb, p=p, q=q, time_s=time_s, gflops=gflops, variant=tokens[0]))
    return results


def best_result(results: list[HplResult]) -> HplResult | None:
    if not results:
        return None
    return max(results, key=lambda result: result.gflops)


def rmax_for(nodes: int, rmax_per_node_gflops: float) -> float:
    return nodes * rmax_per_node_gflops


def efficiency(gflops: float, rmax_gflops: float) -> EfficiencyReport:
    if rmax_gflops <= 0:
        raise NonpositiveRmax(rmax_gflops)
    ratio = gflops / rmax_gflops
    low, high = EFFICIENCY_BAND
    return EfficiencyReport(
        gflops=gflops,
        rmax_gflops=rmax_gflops,
        ratio=ratio,
        in_reference_band=low <= ratio <= high,
    )
