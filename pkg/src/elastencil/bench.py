"""Benchmark harness: drives bundled programs through the real wire protocol.

Every benchmark goes end to end through launcher-spawned processes and the
client protocol (no in-process shortcuts), verifies against the sequential
reference when the grid is small enough, and emits JSON-line reports.
"""

from __future__ import annotations

import json
import time

import numpy as np

from .client import BatchingSession, Session
from .errors import OracleMismatch
from .launcher import JobConfig, Launcher
from .oracle import cavity_reference, laplace_reference
from .programs import cavity_program, laplace_program

ORACLE_MAX_SIZE = 1024


def run_laplace(session: BatchingSession, size: int, iters: int,
                verify: bool = True) -> dict:
    t0 = time.perf_counter()
    names = laplace_program(session, size, iters)
    session.sync()
    wall_s = time.perf_counter() - t0
    oracle_ok = None
    if verify and size <= ORACLE_MAX_SIZE:
        got = session.fetch(names["u"])
        expected = laplace_reference(size, iters)
        oracle_ok = bool(np.array_equal(got, expected))
        if not oracle_ok:
            raise OracleMismatch(
                f"laplace size={size} iters={iters} diverges from reference"
            )
    return {
        "benchmark": "laplace",
        "size": size,
        "iters": iters,
        "wall_s": wall_s,
        "oracle_ok": oracle_ok,
        "batches": session.batches_submitted,
        "stats": session.stats(),
    }


def run_cavity(session: BatchingSession, size: int, iters: int,
               pressure_iters: int = 10, verify: bool = True) -> dict:
    t0 = time.perf_counter()
    names = cavity_program(session, size, iters, pressure_iters)
    session.sync()
    wall_s = time.perf_counter() - t0
    oracle_ok = None
    if verify and size <= ORACLE_MAX_SIZE:
        expected = cavity_reference(size, iters, pressure_iters)
        got = [session.fetch(names[k]) for k in ("u", "v", "p")]
        oracle_ok = all(np.array_equal(g, e) for g, e in zip(got, expected))
        if not oracle_ok:
            raise OracleMismatch(
                f"cavity size={size} iters={iters} diverges from reference"
            )
    return {
        "benchmark": "cavity",
        "size": size,
        "iters": iters,
        "pressure_iters": pressure_iters,
        "wall_s": wall_s,
        "oracle_ok": oracle_ok,
        "batches": session.batches_submitted,
        "stats": session.stats(),
    }


def bench(name: str, size: int, iters: int, workers: int, odf: int = 1,
          flush_depth: int = 100, fuse_batches: bool = True,
          max_workers: int | None = None) -> dict:
    config = JobConfig(workers=workers, max_workers=max_workers, odf=odf,
                       flush_depth=flush_depth)
    with Launcher(config) as job:
        session = Session(job.client_endpoint)
        batching = BatchingSession(session, flush_depth, fuse_batches)
        try:
            if name == "laplace":
                report = run_laplace(batching, size, iters)
            elif name == "cavity":
                report = run_cavity(batching, size, iters)
            else:
                raise ValueError(f"unknown benchmark {name!r}")
        finally:
            session.shutdown()
    report["workers"] = workers
    report["odf"] = odf
    report["flush_depth"] = flush_depth
    report["fused"] = fuse_batches
    return report


def rescale_demo(size: int = 512, phase_iters: int = 300, workers: int = 2,
                 shrink_to: int = 1, flush_depth: int = 50) -> dict:
    """Three-phase timeline: full, shrunk, restored worker counts.

    The mean time per 10 iterations for a phase equals the phase's elapsed
    time divided by its 10-iteration segment count; the per-batch backend
    timeline is kept alongside for plotting.
    """
    config = JobConfig(workers=workers, max_workers=workers, odf=1,
                       flush_depth=flush_depth)
    with Launcher(config) as job:
        session = Session(job.client_endpoint)
        batching = BatchingSession(session, flush_depth)
        try:
            names = laplace_program(batching, size, 0)
            batching.sync()
            marks = {}
            means = {}
            bindings = dict(names)

            def phase(label: str, count: int | None):
                if count is not None:
                    timings = batching.rescale(count)
                    marks[label + "_rescale"] = timings.as_dict()
                start_batch = len(batching.stats()["batch_timeline"])
                from .programs import laplace_iteration_statements

                t0 = time.perf_counter()
                result = laplace_iteration_statements(
                    batching, bindings["u"], bindings["scratch"], phase_iters
                )
                bindings.update(result)
                batching.sync()
                elapsed = time.perf_counter() - t0
                means[label] = elapsed / (phase_iters / 10) * 1000.0
                end_batch = len(batching.stats()["batch_timeline"])
                marks[label] = [start_batch, end_batch]

            phase("initial", None)
            phase("shrunk", shrink_to)
            phase("restored", workers)
            stats = batching.stats()
            final = batching.fetch(bindings["u"])
        finally:
            session.shutdown()

    report = {
        "benchmark": "rescale-demo",
        "size": size,
        "phase_iters": phase_iters,
        "workers": workers,
        "shrink_to": shrink_to,
        "flush_depth": flush_depth,
        "phase_means_ms": means,
        "marks": marks,
        "timeline": stats["batch_timeline"],
        "checksum": float(final.sum()),
        "stats": stats,
    }
    return report


def write_report(path: str, report: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(report, separators=(",", ":")) + "\n")


def read_reports(path: str) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
