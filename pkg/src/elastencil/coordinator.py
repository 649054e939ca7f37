"""Coordinator process: client endpoint, worker control, rescale orchestration.

Serves one client session at a time. Command intake is concurrent with batch
execution (batches are broadcast without waiting for completion, so the
client pipelines), but every observable effect is applied in sequence order:
workers process their control stream strictly in order, and synchronizing
commands resolve all outstanding batch replies first.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import threading
import time

import numpy as np

from . import proto
from .elastic import StageTimings, build_manifest, write_manifest
from .errors import (
    ElastencilError,
    InvalidShape,
    MalformedDag,
    ProtocolError,
    RescaleUnavailable,
    RestartFailed,
    SessionFailed,
    UnknownArray,
    VersionMismatch,
    error_from_code,
)
from .grid import Decomposition, decompose
from .ir import validate_dag
from .proto import (
    INIT,
    JOB_DONE,
    L_DONE,
    L_RESTART,
    REGISTER,
    REPLY_ERR,
    W_BATCH,
    W_CHECKPOINT,
    W_CREATE,
    W_EXIT,
    W_FETCH,
    W_MIGRATE,
    W_RESTORE,
    decode_dag,
    parse_json,
    recv_frame,
    send_json,
)

log = logging.getLogger("elastencil.coordinator")


class _Pending:
    __slots__ = ("event", "kind", "meta", "blob")

    def __init__(self):
        self.event = threading.Event()
        self.kind = None
        self.meta = None
        self.blob = b""

    def wait(self, timeout=None):
        if not self.event.wait(timeout):
            raise TimeoutError("worker reply timed out")
        return self


class WorkerConn:
    """One registered worker: socket, in-order reply matching, reader thread."""

    def __init__(self, worker_id: int, sock: socket.socket, address: str):
        self.id = worker_id
        self.sock = sock
        self.address = address
        self.alive = True
        self._send_lock = threading.Lock()
        self._queue_lock = threading.Lock()
        self._expect: list[_Pending] = []
        threading.Thread(target=self._reader, daemon=True).start()

    def request(self, kind: int, meta: dict, blob: bytes = b"") -> _Pending:
        pending = _Pending()
        with self._queue_lock:
            self._expect.append(pending)
        with self._send_lock:
            send_json(self.sock, kind, meta, blob)
        return pending

    def send_only(self, kind: int, meta: dict) -> None:
        with self._send_lock:
            send_json(self.sock, kind, meta)

    def _reader(self) -> None:
        try:
            while True:
                kind, body = recv_frame(self.sock)
                meta, blob = parse_json(body)
                with self._queue_lock:
                    pending = self._expect.pop(0)
                pending.kind = kind
                pending.meta = meta
                pending.blob = blob
                pending.event.set()
        except (ConnectionError, OSError):
            self.alive = False
            with self._queue_lock:
                for pending in self._expect:
                    pending.kind = REPLY_ERR
                    pending.meta = {"code": 31, "message": "worker connection lost"}
                    pending.event.set()
                self._expect.clear()


class JobStats:
    def __init__(self):
        self.lock = threading.Lock()
        self.batches = 0
        self.kernel_launches = 0
        self.net_messages = 0
        self.rounds: dict[str, int] = {}
        self.batch_timeline: list[tuple[int, float]] = []
        self.rescales: list[dict] = []

    def record_batch(self, batch_id: int, replies: list[dict]) -> None:
        with self.lock:
            self.batches += 1
            self.kernel_launches += sum(r["launches"] for r in replies)
            self.net_messages += sum(r["net_messages"] for r in replies)
            merged: dict[str, int] = {}
            for reply in replies:
                for array, count in reply["rounds"].items():
                    merged[array] = max(merged.get(array, 0), count)
            for array, count in merged.items():
                self.rounds[array] = self.rounds.get(array, 0) + count
            self.batch_timeline.append(
                (batch_id, max((r["wall_ms"] for r in replies), default=0.0))
            )

    def snapshot(self) -> dict:
        with self.lock:
            return {
                "batches": self.batches,
                "kernel_launches": self.kernel_launches,
                "net_messages": self.net_messages,
                "rounds": dict(self.rounds),
                "batch_timeline": [list(t) for t in self.batch_timeline],
                "rescales": list(self.rescales),
            }


class Coordinator:
    def __init__(self, endpoint: str, initial_workers: int, max_workers: int,
                 odf: int, scratch: str):
        self.initial_workers = initial_workers
        self.max_workers = max_workers
        self.odf = odf
        self.scratch = scratch
        os.makedirs(os.path.join(scratch, "logs"), exist_ok=True)
        handler = logging.FileHandler(os.path.join(scratch, "logs", "coordinator.log"))
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)

        host, port = endpoint.rsplit(":", 1)
        self.client_sock = socket.socket()
        self.client_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self.client_sock.bind((host, int(port)))
        except OSError as exc:
            print(f"FATAL PortInUse {endpoint}: {exc}", flush=True)
            raise SystemExit(2)
        self.client_sock.listen(64)

        self.control_sock = socket.socket()
        self.control_sock.bind(("127.0.0.1", 0))
        self.control_sock.listen(64)

        self.client_endpoint = "%s:%d" % self.client_sock.getsockname()
        self.control_endpoint = "127.0.0.1:%d" % self.control_sock.getsockname()[1]

        self.reg_lock = threading.Lock()
        self.reg_cond = threading.Condition(self.reg_lock)
        self.workers: dict[int, WorkerConn] = {}
        self.daemons: dict[int, str] = {}
        self.launcher_sock: socket.socket | None = None
        self.launcher_lock = threading.Lock()

        self.current_workers = initial_workers
        self.decomp: Decomposition | None = None
        self.arrays: dict[int, tuple[int, ...]] = {}
        self.next_array_id = 0
        self.session_error: ElastencilError | None = None
        self.pending_batches: list[tuple[int, list[_Pending]]] = []
        self.stats = JobStats()
        self.manifest_counter = 0
        self._shutdown = False

        threading.Thread(target=self._control_accept, daemon=True).start()

    # -- registration ----------------------------------------------------

    def _control_accept(self) -> None:
        while not self._shutdown:
            try:
                conn, _ = self.control_sock.accept()
                proto.tune_socket(conn)
            except OSError:
                return
            try:
                kind, body = recv_frame(conn)
                if kind != REGISTER:
                    conn.close()
                    continue
                meta, _ = parse_json(body)
            except (ConnectionError, OSError, ProtocolError):
                conn.close()
                continue
            role = meta.get("role")
            with self.reg_cond:
                if role == "worker":
                    self.workers[meta["id"]] = WorkerConn(
                        meta["id"], conn, meta["address"]
                    )
                elif role == "daemon":
                    self.daemons[meta["id"]] = meta["address"]
                    # Daemon connections are registration-only.
                elif role == "launcher":
                    self.launcher_sock = conn
                self.reg_cond.notify_all()

    def wait_workers(self, count: int, timeout: float = 60.0) -> None:
        deadline = time.monotonic() + timeout
        with self.reg_cond:
            while True:
                have = [w for w in self.workers.values() if w.alive]
                if len(have) >= count and all(
                    i in self.workers and self.workers[i].alive for i in range(count)
                ):
                    return
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise RestartFailed(
                        f"only {len(have)}/{count} workers registered"
                    )
                self.reg_cond.wait(remaining)

    def wait_daemons(self, count: int, timeout: float = 60.0) -> None:
        deadline = time.monotonic() + timeout
        with self.reg_cond:
            while len(self.daemons) < count:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise RestartFailed(
                        f"only {len(self.daemons)}/{count} daemons registered"
                    )
                self.reg_cond.wait(remaining)

    def init_workers(self) -> None:
        peers = {
            str(w.id): w.address for w in self.workers.values() if w.alive
        }
        pendings = []
        for w in self._live_workers():
            pendings.append(w.request(INIT, {
                "peers": peers,
                "worker_count": self.current_workers,
                "daemon": self.daemons.get(w.id),
            }))
        for p in pendings:
            p.wait(30)

    def notify_launcher_ready(self) -> None:
        if self.launcher_sock is not None:
            send_json(self.launcher_sock, L_DONE, {})

    def _live_workers(self) -> list[WorkerConn]:
        return [self.workers[i] for i in sorted(self.workers)
                if self.workers[i].alive]

    # -- client session ----------------------------------------------------

    def serve_forever(self) -> None:
        print(f"CLIENT {self.client_endpoint}", flush=True)
        print(f"CONTROL {self.control_endpoint}", flush=True)
        self.wait_daemons(self.max_workers)
        self.wait_workers(self.initial_workers)
        self.init_workers()
        self.notify_launcher_ready()
        log.info("job up: %d workers, %d daemons", self.initial_workers,
                 len(self.daemons))
        while not self._shutdown:
            try:
                conn, peer = self.client_sock.accept()
                proto.tune_socket(conn)
            except OSError:
                break
            log.info("client session from %s", peer)
            self._serve_session(conn)
            conn.close()
        self.client_sock.close()
        self.control_sock.close()

    def _serve_session(self, conn: socket.socket) -> None:
        expected_seq = 0
        while not self._shutdown:
            try:
                kind, body = recv_frame(conn)
                cmd = proto.decode_command(kind, body)
            except (ConnectionError, OSError):
                return
            except VersionMismatch as exc:
                self._safe_reply(conn, proto.encode_error(0, exc.code, str(exc)))
                return
            except (ProtocolError, ElastencilError) as exc:
                self._safe_reply(
                    conn, proto.encode_error(0, getattr(exc, "code", 1), str(exc))
                )
                return
            if cmd.seq != expected_seq:
                self._safe_reply(conn, proto.encode_error(
                    cmd.seq, ProtocolError.code,
                    f"sequence gap: got {cmd.seq}, expected {expected_seq}",
                ))
                return
            expected_seq += 1
            try:
                reply = self._execute(cmd)
            except ElastencilError as exc:
                reply = proto.encode_error(cmd.seq, exc.code, str(exc))
            except Exception as exc:
                log.exception("command failed")
                reply = proto.encode_error(cmd.seq, 1, repr(exc))
            self._safe_reply(conn, reply)
            if cmd.kind == proto.SHUTDOWN:
                self._do_shutdown()
                return

    @staticmethod
    def _safe_reply(conn: socket.socket, reply: tuple[int, bytes]) -> None:
        try:
            proto.send_frame(conn, *reply)
        except (ConnectionError, OSError):
            pass

    # -- command execution ---------------------------------------------------

    def _execute(self, cmd) -> tuple[int, bytes]:
        if self.session_error is not None and cmd.kind != proto.SHUTDOWN:
            err = self.session_error
            return proto.encode_error(
                cmd.seq, SessionFailed.code,
                f"session failed earlier: {err}",
            )
        if cmd.kind == proto.CREATE_ARRAY:
            return self._cmd_create(cmd)
        if cmd.kind == proto.SUBMIT_BATCH:
            return self._cmd_batch(cmd)
        if cmd.kind == proto.FETCH:
            return self._cmd_fetch(cmd)
        if cmd.kind == proto.SYNC:
            self._barrier()
            self._raise_session_error()
            return proto.encode_ack(cmd.seq)
        if cmd.kind == proto.GET_STATS:
            self._barrier()
            self._raise_session_error()
            return proto.encode_stats_result(cmd.seq, self.stats.snapshot())
        if cmd.kind == proto.RESCALE:
            return self._cmd_rescale(cmd)
        if cmd.kind == proto.SHUTDOWN:
            return proto.encode_ack(cmd.seq)
        raise ProtocolError(f"unhandled command kind {cmd.kind}")

    def _cmd_create(self, cmd) -> tuple[int, bytes]:
        shape = tuple(cmd.shape)
        if len(shape) not in (1, 2) or any(e <= 0 for e in shape):
            raise InvalidShape(f"bad shape {shape}")
        if self.decomp is None:
            self.decomp = decompose(shape, self.initial_workers, self.odf)
        else:
            self.decomp.check_divisible(shape)
        array = self.next_array_id
        pendings = [
            w.request(W_CREATE, {
                "array": array,
                "shape": list(shape),
                "decomp": {
                    "tile_grid": list(self.decomp.tile_grid),
                    "odf": self.decomp.odf,
                    "initial_workers": self.decomp.initial_workers,
                },
            })
            for w in self._live_workers()
        ]
        self._await_ok(pendings)
        self.next_array_id += 1
        self.arrays[array] = shape
        return proto.encode_create_result(cmd.seq, array)

    def _cmd_batch(self, cmd) -> tuple[int, bytes]:
        dag = decode_dag(cmd.dag_bytes)
        for node in dag.nodes:
            for stmt in node.statements:
                if stmt.output not in self.arrays:
                    raise UnknownArray(f"array {stmt.output} not created")
                for array in stmt.inputs:
                    if array not in self.arrays:
                        raise UnknownArray(f"array {array} not created")
        try:
            validate_dag(dag, self.arrays)
        except ElastencilError:
            raise
        except Exception as exc:
            raise MalformedDag(str(exc))
        if dag.nodes:
            batch_id = self.stats.batches + len(self.pending_batches)
            pendings = [
                w.request(W_BATCH, {"batch": batch_id}, cmd.dag_bytes)
                for w in self._live_workers()
            ]
            self.pending_batches.append((batch_id, pendings))
        return proto.encode_ack(cmd.seq)

    def _barrier(self) -> None:
        """Resolve all outstanding batches; record stats and any errors."""
        for batch_id, pendings in self.pending_batches:
            replies = []
            for pending in pendings:
                pending.wait(600)
                if pending.kind == REPLY_ERR:
                    self.session_error = error_from_code(
                        pending.meta.get("code", 1),
                        pending.meta.get("message", "batch failed"),
                    )
                else:
                    replies.append(pending.meta)
            if self.session_error is None:
                self.stats.record_batch(batch_id, replies)
        self.pending_batches.clear()

    def _raise_session_error(self) -> None:
        if self.session_error is not None:
            raise self.session_error

    def _await_ok(self, pendings: list[_Pending], timeout: float = 600.0) -> list:
        replies = []
        failure = None
        for pending in pendings:
            pending.wait(timeout)
            if pending.kind == REPLY_ERR:
                failure = error_from_code(
                    pending.meta.get("code", 1), pending.meta.get("message", "")
                )
            else:
                replies.append(pending)
        if failure is not None:
            raise failure
        return replies

    def _cmd_fetch(self, cmd) -> tuple[int, bytes]:
        if cmd.array not in self.arrays:
            raise UnknownArray(f"array {cmd.array} not created")
        cmd.slice.validate_against(self.arrays[cmd.array])
        self._barrier()
        self._raise_session_error()
        bounds = cmd.slice.bounds
        pendings = [
            w.request(W_FETCH, {"array": cmd.array,
                                "bounds": [list(b) for b in bounds]})
            for w in self._live_workers()
        ]
        replies = self._await_ok(pendings)
        out = np.zeros(cmd.slice.extent, dtype=np.float64)
        for pending in replies:
            offset = 0
            for piece in pending.meta["pieces"]:
                extents = [b - a for a, b in piece]
                n = int(np.prod(extents)) * 8
                block = np.frombuffer(
                    pending.blob[offset:offset + n], dtype=np.float64
                ).reshape(extents)
                offset += n
                sel = tuple(
                    slice(a - lo, b - lo)
                    for (a, b), (lo, _) in zip(piece, bounds)
                )
                out[sel] = block
        return proto.encode_fetch_result(
            cmd.seq, cmd.slice.extent, out.tobytes()
        )

    # -- rescale ---------------------------------------------------------

    def _cmd_rescale(self, cmd) -> tuple[int, bytes]:
        new_count = cmd.count
        if new_count < 1 or new_count > self.max_workers:
            raise RescaleUnavailable(
                f"count {new_count} outside [1, {self.max_workers}]"
            )
        self._barrier()
        self._raise_session_error()
        if new_count < self.current_workers:
            timings = self._rescale_shrink(new_count)
        else:
            timings = self._rescale_expand(new_count)
        self.stats.rescales.append(timings.as_dict())
        log.info("rescale to %d: %s", new_count, timings.as_dict())
        return proto.encode_rescale_result(cmd.seq, (
            timings.lb_ms, timings.checkpoint_ms,
            timings.restart_ms, timings.restore_ms,
        ))

    def _migration_plan(self, old_count: int, new_count: int) -> dict:
        assert self.decomp is not None
        old_map = self.decomp.owner_map(old_count)
        new_map = self.decomp.owner_map(new_count)
        return {
            "%d,%d" % coords: [old_map[coords], new_map[coords]]
            for coords in self.decomp.all_coords()
        }

    def _stage_migrate(self, old_count: int, new_count: int) -> float:
        t0 = time.perf_counter()
        if self.decomp is not None:
            plan = self._migration_plan(old_count, new_count)
            pendings = [
                w.request(W_MIGRATE, {"plan": plan, "worker_count": new_count})
                for w in self._live_workers()
            ]
            self._await_ok(pendings)
        return (time.perf_counter() - t0) * 1e3

    def _stage_checkpoint(self) -> tuple[float, str]:
        t0 = time.perf_counter()
        pendings = [
            w.request(W_CHECKPOINT, {}) for w in self._live_workers()
        ]
        replies = self._await_ok(pendings)
        records: list[dict] = []
        arrays_meta: dict = {}
        for pending in replies:
            records.extend(pending.meta["records"])
            if pending.meta.get("has_tiles"):
                arrays_meta = pending.meta["arrays"]
        manifest = build_manifest(
            0, self.current_workers, self.decomp, arrays_meta, records
        )
        self.manifest_counter += 1
        path = os.path.join(
            self.scratch, f"manifest-{self.manifest_counter}.json"
        )
        write_manifest(path, manifest)
        return (time.perf_counter() - t0) * 1e3, path

    def _stage_restart(self, new_count: int) -> float:
        t0 = time.perf_counter()
        for w in self._live_workers():
            w.send_only(W_EXIT, {})
        with self.reg_cond:
            self.workers.clear()
        if self.launcher_sock is None:
            raise RestartFailed("no launcher attached")
        with self.launcher_lock:
            send_json(self.launcher_sock, L_RESTART, {"count": new_count})
            kind, body = recv_frame(self.launcher_sock)
        meta, _ = parse_json(body)
        if kind != L_DONE or not meta.get("ok", False):
            raise RestartFailed(meta.get("message", "launcher restart failed"))
        self.wait_workers(new_count)
        self.current_workers = new_count
        self.init_workers()
        return (time.perf_counter() - t0) * 1e3

    def _stage_restore(self, manifest_path: str, new_count: int) -> float:
        t0 = time.perf_counter()
        pendings = [
            w.request(W_RESTORE, {"path": manifest_path,
                                  "worker_count": new_count})
            for w in self._live_workers()
        ]
        self._await_ok(pendings)
        return (time.perf_counter() - t0) * 1e3

    def _rescale_shrink(self, new_count: int) -> StageTimings:
        old_count = self.current_workers
        lb_ms = self._stage_migrate(old_count, new_count)
        checkpoint_ms, path = self._stage_checkpoint()
        restart_ms = self._stage_restart(new_count)
        restore_ms = self._stage_restore(path, new_count)
        return StageTimings(lb_ms, checkpoint_ms, restart_ms, restore_ms)

    def _rescale_expand(self, new_count: int) -> StageTimings:
        old_count = self.current_workers
        checkpoint_ms, path = self._stage_checkpoint()
        restart_ms = self._stage_restart(new_count)
        restore_ms = self._stage_restore(path, new_count)
        # Tiles come back at their pre-restart owners; the load-balance step
        # then migrates them onto the expanded worker set.
        lb_ms = self._stage_migrate(old_count, new_count)
        return StageTimings(lb_ms, checkpoint_ms, restart_ms, restore_ms)

    # -- shutdown ---------------------------------------------------------

    def _do_shutdown(self) -> None:
        self._shutdown = True
        for w in self._live_workers():
            try:
                w.send_only(W_EXIT, {})
            except OSError:
                pass
        if self.launcher_sock is not None:
            try:
                send_json(self.launcher_sock, JOB_DONE, {})
            except OSError:
                pass
        log.info("shutdown complete")


def coordinator_main(endpoint: str, workers: int, max_workers: int,
                     odf: int, scratch: str) -> None:
    try:
        # Control-plane work should yield to worker compute on small hosts.
        os.nice(5)
    except OSError:
        pass
    Coordinator(endpoint, workers, max_workers, odf, scratch).serve_forever()
