"""Command-line interface: job launch, benchmarks, and internal role mains.

Exit codes: 0 success, 1 oracle mismatch, 2 infrastructure failure.
"""

from __future__ import annotations

import argparse
import json
import socket
import sys

from .errors import ElastencilError, OracleMismatch


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="elastencil",
        description="Distributed elastic stencil runtime",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_launch = sub.add_parser("launch", help="launch a job and wait")
    p_launch.add_argument("--workers", type=int, default=2)
    p_launch.add_argument("--max-workers", type=int, default=None)
    p_launch.add_argument("--odf", type=int, default=1)
    p_launch.add_argument("--endpoint", default="127.0.0.1:0")
    p_launch.add_argument("--scratch", default=None)

    p_bench = sub.add_parser("bench", help="run a bundled benchmark")
    p_bench.add_argument("name", choices=["laplace", "cavity"])
    p_bench.add_argument("--size", type=int, default=64)
    p_bench.add_argument("--iters", type=int, default=100)
    p_bench.add_argument("--workers", type=int, default=2)
    p_bench.add_argument("--odf", type=int, default=1)
    p_bench.add_argument("--flush-depth", type=int, default=100)
    p_bench.add_argument("--no-fuse", action="store_true")
    p_bench.add_argument("--report", default=None, help="append JSON line here")

    p_demo = sub.add_parser("rescale-demo",
                            help="shrink/expand timeline experiment")
    p_demo.add_argument("--size", type=int, default=512)
    p_demo.add_argument("--phase-iters", type=int, default=300)
    p_demo.add_argument("--workers", type=int, default=2)
    p_demo.add_argument("--shrink-to", type=int, default=1)
    p_demo.add_argument("--flush-depth", type=int, default=50)
    p_demo.add_argument("--report", default=None)

    p_report = sub.add_parser("report", help="summarize a JSON-lines report")
    p_report.add_argument("path")

    p_coord = sub.add_parser("_coordinator")
    p_coord.add_argument("--endpoint", required=True)
    p_coord.add_argument("--workers", type=int, required=True)
    p_coord.add_argument("--max-workers", type=int, required=True)
    p_coord.add_argument("--odf", type=int, required=True)
    p_coord.add_argument("--scratch", required=True)

    p_worker = sub.add_parser("_worker")
    p_worker.add_argument("--id", type=int, required=True)
    p_worker.add_argument("--coordinator", required=True)
    p_worker.add_argument("--scratch", required=True)

    p_daemon = sub.add_parser("_daemon")
    p_daemon.add_argument("--id", type=int, required=True)
    p_daemon.add_argument("--coordinator", required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except OracleMismatch as exc:
        print(f"ORACLE MISMATCH: {exc}", file=sys.stderr)
        return 1
    except ElastencilError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "launch":
        return _cmd_launch(args)
    if args.command == "bench":
        return _cmd_bench(args)
    if args.command == "rescale-demo":
        return _cmd_demo(args)
    if args.command == "report":
        return _cmd_report(args)
    if args.command == "_coordinator":
        from .coordinator import coordinator_main

        coordinator_main(args.endpoint, args.workers, args.max_workers,
                         args.odf, args.scratch)
        return 0
    if args.command == "_worker":
        from .worker import worker_main

        worker_main(args.id, args.coordinator, args.scratch)
        return 0
    if args.command == "_daemon":
        return _cmd_daemon(args)
    raise AssertionError(args.command)


def _cmd_launch(args) -> int:
    from .launcher import JobConfig, Launcher

    config = JobConfig(workers=args.workers, max_workers=args.max_workers,
                       odf=args.odf, endpoint=args.endpoint,
                       scratch=args.scratch)
    launcher = Launcher(config)
    try:
        launcher.start()
        print(f"endpoint {launcher.client_endpoint}", flush=True)
        print(f"scratch  {launcher.scratch}", flush=True)
        launcher.wait_done()
    except KeyboardInterrupt:
        pass
    finally:
        launcher.shutdown()
    return 0


def _cmd_bench(args) -> int:
    from .bench import bench, write_report

    report = bench(args.name, args.size, args.iters, args.workers,
                   odf=args.odf, flush_depth=args.flush_depth,
                   fuse_batches=not args.no_fuse)
    if args.report:
        write_report(args.report, report)
    summary = {k: report[k] for k in
               ("benchmark", "size", "iters", "workers", "wall_s", "oracle_ok",
                "batches")}
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_demo(args) -> int:
    from .bench import rescale_demo, write_report

    report = rescale_demo(args.size, args.phase_iters, args.workers,
                          args.shrink_to, args.flush_depth)
    if args.report:
        write_report(args.report, report)
    print(json.dumps({
        "phase_means_ms": report["phase_means_ms"],
        "rescales": report["stats"]["rescales"],
    }, indent=2))
    return 0


def _cmd_report(args) -> int:
    from .bench import read_reports

    for report in read_reports(args.path):
        line = {k: v for k, v in report.items() if k not in ("stats", "timeline")}
        print(json.dumps(line))
    return 0


def _cmd_daemon(args) -> int:
    import os

    from .daemon import MemoryDaemon
    from .proto import REGISTER, send_json

    try:
        os.nice(10)  # daemons are idle outside rescale windows
    except OSError:
        pass
    daemon = MemoryDaemon()
    host, port = args.coordinator.rsplit(":", 1)
    reg = socket.create_connection((host, int(port)), timeout=30)
    send_json(reg, REGISTER, {
        "role": "daemon", "id": args.id, "address": daemon.address,
    })
    try:
        daemon.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        reg.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
