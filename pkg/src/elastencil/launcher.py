"""Job launcher: spawns coordinator, daemons, and workers as OS processes.

The launcher is a pure supervisor: it never touches array data. It owns the
worker process lifecycle, including the genuine terminate-and-respawn that a
rescale's restart stage requires, and guarantees that no spawned process
outlives the job.
"""

from __future__ import annotations

import os
import signal
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass

from .errors import PortInUse, RestartFailed, SpawnFailed
from .proto import (JOB_DONE, L_DONE, L_RESTART, REGISTER, parse_json,
                    recv_frame, send_json, tune_socket)


@dataclass
class JobConfig:
    workers: int = 2
    max_workers: int | None = None
    odf: int = 1
    endpoint: str = "127.0.0.1:0"
    scratch: str | None = None
    flush_depth: int = 100

    def __post_init__(self):
        if self.max_workers is None:
            self.max_workers = self.workers
        if not (1 <= self.workers <= self.max_workers):
            raise ValueError("need 1 <= workers <= max_workers")
        if self.odf < 1:
            raise ValueError("odf must be >= 1")


def _spawn(args: list[str], log_path: str) -> subprocess.Popen:
    log_file = open(log_path, "ab")
    try:
        return subprocess.Popen(
            [sys.executable, "-m", "elastencil.cli", *args],
            stdout=subprocess.PIPE if args[0] == "_coordinator" else log_file,
            stderr=log_file,
            start_new_session=True,
        )
    except OSError as exc:
        raise SpawnFailed(str(exc))


class Launcher:
    def __init__(self, config: JobConfig):
        self.config = config
        self.scratch = config.scratch or os.path.join(
            "/tmp", f"elastencil-{os.getpid()}-{int(time.time() * 1000)}"
        )
        os.makedirs(os.path.join(self.scratch, "logs"), exist_ok=True)
        self.coordinator: subprocess.Popen | None = None
        self.daemons: list[subprocess.Popen] = []
        self.workers: list[subprocess.Popen] = []
        self.client_endpoint = ""
        self.control_endpoint = ""
        self._sock: socket.socket | None = None
        self._ready = threading.Event()
        self._done = threading.Event()
        self._lock = threading.Lock()

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "Launcher":
        cfg = self.config
        self.coordinator = _spawn([
            "_coordinator",
            "--endpoint", cfg.endpoint,
            "--workers", str(cfg.workers),
            "--max-workers", str(cfg.max_workers),
            "--odf", str(cfg.odf),
            "--scratch", self.scratch,
        ], os.path.join(self.scratch, "logs", "coordinator-err.log"))
        self._read_endpoints()

        for i in range(cfg.max_workers):
            self.daemons.append(_spawn([
                "_daemon", "--id", str(i),
                "--coordinator", self.control_endpoint,
            ], os.path.join(self.scratch, "logs", f"daemon-{i}.log")))
        self._spawn_workers(cfg.workers)

        host, port = self.control_endpoint.rsplit(":", 1)
        self._sock = tune_socket(
            socket.create_connection((host, int(port)), timeout=30)
        )
        send_json(self._sock, REGISTER, {"role": "launcher"})
        threading.Thread(target=self._serve_coordinator, daemon=True).start()
        if not self._ready.wait(90):
            self.shutdown()
            raise SpawnFailed("job did not come up within 90s")
        return self

    def _read_endpoints(self) -> None:
        assert self.coordinator is not None and self.coordinator.stdout
        deadline = time.monotonic() + 30
        while not (self.client_endpoint and self.control_endpoint):
            if self.coordinator.poll() is not None:
                raise PortInUse(
                    f"coordinator exited rc={self.coordinator.returncode} "
                    f"(see {self.scratch}/logs/coordinator-err.log)"
                )
            if time.monotonic() > deadline:
                raise SpawnFailed("coordinator did not report endpoints")
            line = self.coordinator.stdout.readline().decode().strip()
            if line.startswith("CLIENT "):
                self.client_endpoint = line.split(" ", 1)[1]
            elif line.startswith("CONTROL "):
                self.control_endpoint = line.split(" ", 1)[1]
            elif line.startswith("FATAL"):
                raise PortInUse(line)

    def _spawn_workers(self, count: int) -> None:
        with self._lock:
            for i in range(count):
                self.workers.append(_spawn([
                    "_worker", "--id", str(i),
                    "--coordinator", self.control_endpoint,
                    "--scratch", self.scratch,
                ], os.path.join(self.scratch, "logs", f"worker-{i}-err.log")))

    def _serve_coordinator(self) -> None:
        assert self._sock is not None
        try:
            while True:
                kind, body = recv_frame(self._sock)
                if kind == L_DONE:
                    self._ready.set()
                elif kind == L_RESTART:
                    meta, _ = parse_json(body)
                    try:
                        self._restart_workers(meta["count"])
                        send_json(self._sock, L_DONE, {"ok": True})
                    except Exception as exc:
                        send_json(self._sock, L_DONE,
                                  {"ok": False, "message": str(exc)})
                elif kind == JOB_DONE:
                    self._done.set()
                    return
        except (ConnectionError, OSError):
            self._done.set()

    def _restart_workers(self, count: int) -> None:
        """Reap the old worker set (they received exit commands) and respawn."""
        with self._lock:
            old = list(self.workers)
            self.workers.clear()
        deadline = time.monotonic() + 30
        for proc in old:
            remaining = max(0.1, deadline - time.monotonic())
            try:
                proc.wait(timeout=remaining)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        if count > self.config.max_workers:
            raise RestartFailed(f"count {count} exceeds max {self.config.max_workers}")
        self._spawn_workers(count)

    # -- teardown ------------------------------------------------------------

    def all_pids(self) -> list[int]:
        with self._lock:
            procs = [self.coordinator, *self.daemons, *self.workers]
        return [p.pid for p in procs if p is not None]

    def wait_done(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)

    def shutdown(self) -> None:
        with self._lock:
            procs = [p for p in [self.coordinator, *self.workers, *self.daemons]
                     if p is not None]
        for proc in procs:
            if proc.poll() is None:
                try:
                    proc.terminate()
                except OSError:
                    pass
        deadline = time.monotonic() + 10
        for proc in procs:
            try:
                proc.wait(timeout=max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                try:
                    os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
                except (OSError, ProcessLookupError):
                    proc.kill()
                proc.wait()
        if self._sock is not None:
            self._sock.close()

    def __enter__(self) -> "Launcher":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()
