from __future__ import annotations

import importlib
import math
import random
from dataclasses import replace
from fractions import Fraction

import pytest


hpl = importlib.import_module("src.hpl")
models = importlib.import_module("src.models")
store = importlib.import_module("src.store")
errors = importlib.import_module("src.errors")

GB = 1_000_000_000

HPL_OUTPUT = """\
================================================================================
HPLinpack 2.3  --  High-Performance Linpack benchmark  --   December 2, 2018
================================================================================
T/V                N    NB     P     Q               Time                 Gflops
--------------------------------------------------------------------------------
WR11C2R4      159936   192     4     6            5458.27             4.9962e+02
HPL_pdgesv() start time Mon Jun  3 10:12:01 2019
||Ax-b||_oo/(eps*(||A||_oo*||x||_oo+||b||_oo)*N)=   2.43175418e-03 ...... PASSED
================================================================================
T/V                N    NB     P     Q               Time                 Gflops
--------------------------------------------------------------------------------
WR11C2R4      159936   192     4     6            5454.30             5.0001e+02
================================================================================
"""


@pytest.mark.parametrize(
    "gflops,rmax,ratio,in_band",
    [
        (105, 140, 0.750, True),
        (412, 540, 0.7630, True),
        (500, 640, 0.7813, False),
        (146, 160, 0.9125, False),
    ],
)
def test_efficiency_against_reference_band(gflops, rmax, ratio, in_band) -> None:
    report = hpl.efficiency(gflops, rmax)
    assert report.ratio == pytest.approx(ratio, abs=0.0005)
    assert report.in_reference_band is in_band


@pytest.mark.parametrize("rmax", [0, -160])
def test_efficiency_needs_positive_rmax(rmax) -> None:
    with pytest.raises(errors.NonpositiveRmax):
        hpl.efficiency(100, rmax)


def test_rmax_scales_with_nodes() -> None:
    assert hpl.rmax_for(4, 160) == 640


def test_problem_size_for_four_64gb_nodes() -> None:
    config, text = hpl.generate_hpl_input(4, 6, 64 * GB, 0.8, 192)
    assert config.n == 159936
    assert (config.p, config.q) == (4, 6)
    assert config.n % config.nb == 0
    assert 8 * config.n**2 <= 0.8 * 4 * 64 * GB
    assert hpl.parse_hpl_dat(text) == hpl.HplConfig(n=159936, nb=192, p=4, q=6, mem_fraction=None)


def _grid_oracle(total: int) -> tuple[int, int]:
    pairs = [(p, total // p) for p in range(1, total + 1) if total % p == 0 and p <= total // p]
    return min(pairs, key=lambda pair: pair[1] - pair[0])


def test_process_grid_matches_factor_pair_oracle() -> None:
    for total in range(1, 1025):
        assert hpl.process_grid(total) == _grid_oracle(total), total


def test_prime_totals_give_a_single_row() -> None:
    assert hpl.process_grid(7) == (1, 7)
    assert hpl.process_grid(1) == (1, 1)


@pytest.mark.parametrize(
    "args",
    [
        (1, 1, 1_000, 0.8, 192),
        (0, 4, 64 * GB, 0.8, 192),
        (4, 4, 64 * GB, 0.0, 192),
        (4, 4, 64 * GB, 1.5, 192),
    ],
)
def test_infeasible_inputs(args) -> None:
    with pytest.raises(errors.Infeasible):
        hpl.generate_hpl_input(*args)


def test_hpl_dat_layout() -> None:
    text = hpl.render_hpl_dat(hpl.HplConfig(n=1000, nb=100, p=2, q=3))
    lines = text.splitlines()
    assert len(lines) == 31
    assert lines[5].split()[0] == "1000"
    assert lines[7].split()[0] == "100"
    assert lines[10].split()[:2] == ["2", "Ps"]
    assert lines[11].split()[:2] == ["3", "Qs"]


def test_parse_hpl_dat_reports_bad_lines() -> None:
    with pytest.raises(errors.ParseError):
        hpl.parse_hpl_dat("too\nshort\n")
    lines = hpl.render_hpl_dat(hpl.HplConfig(n=1000, nb=100, p=2, q=3)).splitlines()
    lines[5] = "lots         Ns"
    with pytest.raises(errors.ParseError) as excinfo:
        hpl.parse_hpl_dat("\n".join(lines))
    assert excinfo.value.line_no == 6


def _job(node_count: int, tasks_per_node: int) -> models.JobSpec:
    return models.JobSpec(
        job_id="job-0001",
        node_count=node_count,
        tasks_per_node=tasks_per_node,
        walltime_limit=3_600_000,
        image=store.ImageRef.parse("hpl"),
    )


def test_hybrid_command_for_single_process() -> None:
    expected = "mpirun -np 1 singularity exec hpl.sif xhpl ./HPL.dat"
    assert hpl.build_hybrid_command(_job(1, 1), "hpl.sif") == expected
    assert hpl.build_hybrid_command(_job(1, 1), store.ImageRef.parse("hpl")) == expected


def test_hybrid_command_uses_total_ranks() -> None:
    command = hpl.build_hybrid_command(_job(4, 6), "hpl.sif", "HPL-4node.dat")
    assert command == "mpirun -np 24 singularity exec hpl.sif xhpl ./HPL-4node.dat"


def test_hybrid_command_refuses_incompatible_mpi() -> None:
    compat = store.check_mpi_compat(store.MpiRuntime.parse("OpenMPI 3.1.0"), store.MpiRuntime.parse("MPICH 3.3.0"))
    with pytest.raises(errors.IncompatibleMpi):
        hpl.build_hybrid_command(_job(1, 1), "hpl.sif", compat=compat)


def test_parse_hpl_output_picks_up_every_result_row() -> None:
    results = hpl.parse_hpl_output(HPL_OUTPUT)
    assert len(results) == 2
    assert results[0].variant == "WR11C2R4"
    assert (results[0].n, results[0].nb, results[0].p, results[0].q) == (159936, 192, 4, 6)

    best = hpl.best_result(results)
    assert best.gflops == pytest.approx(500.01)
    assert math.isclose(hpl.efficiency(best.gflops, hpl.rmax_for(4, 160)).ratio, 500.01 / 640)


def test_parse_hpl_output_rejects_short_rows() -> None:
    text = "T/V N NB P Q Time Gflops\nWR11C2R4      159936   192     4     6            5458.27\n"
    with pytest.raises(errors.ParseError) as excinfo:
        hpl.parse_hpl_output(text)
    assert excinfo.value.line_no == 2


def test_best_result_of_nothing() -> None:
    assert hpl.best_result([]) is None
    assert hpl.parse_hpl_output("no results here\n") == []


def test_generated_inputs_hold_for_random_shapes() -> None:
    rng = random.Random(42)
    for _ in range(500):
        nodes = rng.randint(1, 16)
        cores = rng.randint(1, 64)
        mem_bytes = rng.randint(1, 512) * GB
        fraction = rng.choice([0.5, 0.7, 0.8, 0.9, 1.0])
        nb = rng.choice([64, 128, 192, 256])

        config, text = hpl.generate_hpl_input(nodes, cores, mem_bytes, fraction, nb)

        budget = Fraction(str(fraction)) * nodes * mem_bytes
        assert config.n % config.nb == 0
        assert 8 * config.n**2 <= budget
        assert 8 * (config.n + config.nb) ** 2 > budget
        assert config.p * config.q == nodes * cores
        assert config.p <= config.q
        assert hpl.parse_hpl_dat(text) == replace(config, mem_fraction=None)


def test_efficiency_ratio_recovers_gflops() -> None:
    rng = random.Random(8)
    for _ in range(1000):
        gflops = rng.uniform(0.0, 10_000.0)
        rmax = rng.uniform(0.001, 100_000.0)
        report = hpl.efficiency(gflops, rmax)
        assert math.isclose(report.ratio * rmax, gflops, rel_tol=1e-9, abs_tol=1e-9)
