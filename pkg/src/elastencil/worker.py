"""Worker process: owns tiles, executes batches, exchanges halos with peers.

One control connection to the coordinator (commands arrive and are applied
strictly in order; each gets exactly one reply) plus a listening socket for
peer traffic (halo strips and migrating tile payloads). Batch execution runs
inline in the control loop; incoming peer frames are pumped from that same
thread whenever the executor is waiting on an exchange, so a strip arrival
wakes the compute lane directly instead of bouncing through a reader thread.
"""

from __future__ import annotations

import json
import logging
import os
import selectors
import socket
import struct
import threading
import time

from .daemon import DaemonClient
from .elastic import (
    checkpoint_store,
    owner_map_from_manifest,
    read_manifest,
    restore_store,
)
from .errors import ElastencilError
from .exchange import ExchangeManager, decode_halo, encode_halo
from .executor import Executor
from .grid import ArrayInfo, Decomposition, TileStore, adopt_blob, checkpoint_blob
from .proto import (
    HALO,
    INIT,
    PEER_HELLO,
    REGISTER,
    REPLY_ERR,
    REPLY_OK,
    TILE_DATA,
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
    send_frame,
    send_json,
    tune_socket,
)

log = logging.getLogger("elastencil.worker")

_FRAME_HEADER = struct.Struct("<IHH")


class PeerHub:
    """Inbound peer traffic, pumped from the worker's main thread.

    The accept thread only parks new connections here; all reads and frame
    dispatch happen in pump(), called by the executor while it waits for an
    exchange round and by the migration wait loop.
    """

    def __init__(self, on_halo, on_tile):
        self.selector = selectors.DefaultSelector()
        self.on_halo = on_halo
        self.on_tile = on_tile
        self._pending: list[socket.socket] = []
        self._pending_lock = threading.Lock()
        self._buffers: dict[socket.socket, bytearray] = {}

    def adopt(self, sock: socket.socket) -> None:
        with self._pending_lock:
            self._pending.append(sock)

    def pump(self, timeout: float) -> int:
        """Read available peer frames; returns how many were dispatched."""
        with self._pending_lock:
            for sock in self._pending:
                sock.setblocking(False)
                self.selector.register(sock, selectors.EVENT_READ)
                self._buffers[sock] = bytearray()
            self._pending.clear()
        if not self._buffers:
            if timeout:
                threading.Event().wait(timeout)
            return 0
        handled = 0
        for key, _ in self.selector.select(timeout):
            sock = key.fileobj
            try:
                data = sock.recv(1 << 20)
            except (BlockingIOError, InterruptedError):
                continue
            except OSError:
                data = b""
            if not data:
                log.warning("peer connection closed")
                self.selector.unregister(sock)
                self._buffers.pop(sock, None)
                sock.close()
                continue
            buf = self._buffers[sock]
            buf += data
            handled += self._drain(buf)
        return handled

    def _drain(self, buf: bytearray) -> int:
        handled = 0
        while len(buf) >= _FRAME_HEADER.size:
            length, _version, kind = _FRAME_HEADER.unpack_from(buf, 0)
            total = 4 + length
            if len(buf) < total:
                break
            body = bytes(buf[_FRAME_HEADER.size:total])
            del buf[:total]
            if kind == HALO:
                self.on_halo(decode_halo(body))
            elif kind == TILE_DATA:
                _, blob = parse_json(body)
                self.on_tile(blob)
            else:
                log.warning("unknown peer frame kind %s", kind)
            handled += 1
        return handled

    def close(self) -> None:
        for sock in list(self._buffers):
            try:
                self.selector.unregister(sock)
            except (KeyError, ValueError):
                pass
            sock.close()
        self._buffers.clear()


class Worker:
    def __init__(self, worker_id: int, coordinator: str, scratch: str):
        self.id = worker_id
        self.scratch = scratch
        self._setup_logging()

        self.listener = socket.socket()
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind(("127.0.0.1", 0))
        self.listener.listen(64)
        self.address = "127.0.0.1:%d" % self.listener.getsockname()[1]

        host, port = coordinator.rsplit(":", 1)
        self.coord = tune_socket(socket.create_connection((host, int(port))))
        send_json(self.coord, REGISTER,
                  {"role": "worker", "id": self.id, "address": self.address})

        self.peer_dir: dict[int, str] = {}
        self.daemon_addr: str | None = None
        self.worker_count = 0
        self.decomp: Decomposition | None = None
        self.store: TileStore | None = None
        self.manager: ExchangeManager | None = None
        self.executor: Executor | None = None

        self._peer_out: dict[int, socket.socket] = {}
        self._peer_dir_lock = threading.Lock()
        self.hub = PeerHub(self._on_halo, self._on_tile)

        self._mig_expected = 0
        self._mig_received = 0

        self._running = True
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def _setup_logging(self) -> None:
        os.makedirs(os.path.join(self.scratch, "logs"), exist_ok=True)
        handler = logging.FileHandler(
            os.path.join(self.scratch, "logs", f"worker-{self.id}.log")
        )
        handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)

    # -- peer plumbing -------------------------------------------------------

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _ = self.listener.accept()
                tune_socket(conn)
                kind, _body = recv_frame(conn)
            except OSError:
                return
            except ConnectionError:
                continue
            if kind != PEER_HELLO:
                conn.close()
                continue
            self.hub.adopt(conn)

    def _on_halo(self, msg) -> None:
        assert self.manager is not None
        self.manager.on_message(msg)

    def _on_tile(self, blob: bytes) -> None:
        adopt_blob(self.store, blob)
        self._mig_received += 1

    def _send_peer(self, dest: int, kind: int, body: bytes) -> None:
        # Sends happen on the main thread only; outbound connections are
        # write-only (the peer reads them through its own hub).
        with self._peer_dir_lock:
            sock = self._peer_out.get(dest)
            if sock is None:
                host, port = self.peer_dir[dest].rsplit(":", 1)
                sock = tune_socket(socket.create_connection((host, int(port))))
                send_json(sock, PEER_HELLO, {"id": self.id})
                self._peer_out[dest] = sock
        send_frame(sock, kind, body)

    def _halo_sender(self, dest: int, msg) -> None:
        self._send_peer(dest, HALO, encode_halo(msg))

    # -- infrastructure ------------------------------------------------------

    def _build_runtime(self, owner_map: dict) -> None:
        assert self.store is not None
        self.manager = ExchangeManager(
            self.store, self.id, owner_map, self._halo_sender
        )
        old_depths = self.executor.depths if self.executor else {}
        self.executor = Executor(self.store, self.manager)
        self.executor.depths = dict(old_depths)
        self.executor.idle_wait = self._idle_pump

    def _idle_pump(self, timeout: float) -> None:
        # Rounds usually complete within a fraction of a millisecond of the
        # peers reaching the same node, and this core has nothing else to do,
        # so poll briefly before paying for a blocking wakeup.
        deadline = time.perf_counter() + 5e-4
        while True:
            if self.hub.pump(0):
                return
            if time.perf_counter() >= deadline:
                break
        self.hub.pump(timeout)

    # -- command handlers ----------------------------------------------------

    def run(self) -> None:
        while self._running:
            try:
                kind, body = recv_frame(self.coord)
            except (ConnectionError, OSError):
                break
            meta, blob = parse_json(body)
            try:
                self._dispatch(kind, meta, blob)
            except ElastencilError as exc:
                send_json(self.coord, REPLY_ERR,
                          {"code": exc.code, "message": str(exc)})
            except Exception as exc:  # defensive: report, do not wedge
                log.exception("worker %d failed handling %s", self.id, kind)
                send_json(self.coord, REPLY_ERR, {"code": 1, "message": repr(exc)})
        self._running = False
        self.listener.close()
        self.hub.close()

    def _dispatch(self, kind: int, meta: dict, blob: bytes) -> None:
        if kind == INIT:
            self.peer_dir = {int(k): v for k, v in meta["peers"].items()}
            self.worker_count = meta["worker_count"]
            self.daemon_addr = meta.get("daemon")
            self._peer_out.clear()
            send_json(self.coord, REPLY_OK, {})
        elif kind == W_CREATE:
            self._handle_create(meta)
        elif kind == W_BATCH:
            self._handle_batch(meta, blob)
        elif kind == W_FETCH:
            self._handle_fetch(meta)
        elif kind == W_MIGRATE:
            self._handle_migrate(meta)
        elif kind == W_CHECKPOINT:
            self._handle_checkpoint(meta)
        elif kind == W_RESTORE:
            self._handle_restore(meta)
        elif kind == W_EXIT:
            self._running = False
        else:
            send_json(self.coord, REPLY_ERR,
                      {"code": 1, "message": f"unknown control kind {kind}"})

    def _handle_create(self, meta: dict) -> None:
        if self.decomp is None:
            spec = meta["decomp"]
            self.decomp = Decomposition(
                tuple(spec["tile_grid"]), spec["odf"], spec["initial_workers"]
            )
            owner_map = self.decomp.owner_map(self.worker_count)
            owned = [c for c, o in owner_map.items() if o == self.id]
            self.store = TileStore(self.decomp, owned)
            self._build_runtime(owner_map)
        self.store.create_array(ArrayInfo(meta["array"], tuple(meta["shape"])))
        send_json(self.coord, REPLY_OK, {})

    def _handle_batch(self, meta: dict, blob: bytes) -> None:
        dag = decode_dag(blob)
        stats = self.executor.execute_batch(dag)
        record = {
            "batch": meta["batch"],
            "nodes": stats.nodes_executed,
            "launches": stats.kernel_launches,
            "rounds": {str(k): v for k, v in stats.rounds.items()},
            "net_messages": stats.net_messages,
            "wall_ms": stats.wall_ms,
            "compute_ms": round(stats.compute_ms, 3),
            "wait_ms": round(stats.wait_ms, 3),
            "prepare_ms": round(stats.prepare_ms, 3),
        }
        log.info("batch %s", json.dumps(
            record | {"node_ms": {str(k): round(v, 3)
                                  for k, v in stats.node_ms.items()}},
            separators=(",", ":"),
        ))
        send_json(self.coord, REPLY_OK, record)

    def _handle_fetch(self, meta: dict) -> None:
        array = meta["array"]
        bounds = tuple(tuple(b) for b in meta["bounds"])
        pieces = []
        payload = bytearray()
        if self.store is not None and array in self.store.arrays:
            for piece, block in self.store.gather_slice_pieces(array, bounds):
                pieces.append([list(b) for b in piece])
                payload += block.tobytes()
        send_json(self.coord, REPLY_OK, {"pieces": pieces}, bytes(payload))

    def _handle_migrate(self, meta: dict) -> None:
        """Load-balance stage: stream departing tiles to their new owners."""
        plan = {
            tuple(int(x) for x in key.split(",")): (value[0], value[1])
            for key, value in meta["plan"].items()
        }
        self.worker_count = meta["worker_count"]
        n_arrays = len(self.store.arrays) if self.store else 0
        incoming = sum(
            1 for _, (old, new) in plan.items()
            if new == self.id and old != self.id
        ) * n_arrays
        self._mig_expected = incoming
        self._mig_received = 0
        if self.store is not None:
            outgoing = sorted(
                coords for coords, (old, new) in plan.items()
                if old == self.id and new != self.id
            )
            for coords in outgoing:
                tile = self.store.tiles[coords]
                dest = plan[coords][1]
                for array in sorted(self.store.arrays):
                    blob = checkpoint_blob(self.store, tile, array)
                    header = json.dumps({}).encode()
                    self._send_peer(
                        dest, TILE_DATA,
                        struct.pack("<I", len(header)) + header + blob,
                    )
            while self._mig_received < self._mig_expected:
                self.hub.pump(0.2)
            for coords in outgoing:
                del self.store.tiles[coords]
            new_map = {coords: new for coords, (_, new) in plan.items()}
            assert self.manager is not None and not self.manager.active
            assert not self.manager.buffered, "halo traffic during migration"
            self.manager.owner_map = new_map
            # Migrated tiles arrive with zeroed ghost frames; advancing the
            # local generation of every array (uniformly on all workers)
            # forces a re-exchange under fresh round keys. Ghost labels are
            # then aligned one behind local: adopted and resident tiles carry
            # different last-exchange generations, and only equality against
            # the local generation is meaningful.
            for array in sorted(self.store.arrays):
                self.store.bump_local_epoch(array)
                for tile in self.store.tiles.values():
                    tile.ghost_epoch[array] = tile.local_epoch[array] - 1
        send_json(self.coord, REPLY_OK, {})

    def _handle_checkpoint(self, meta: dict) -> None:
        if self.store is None:
            send_json(self.coord, REPLY_OK, {"records": [], "arrays": {},
                                             "has_tiles": False})
            return
        client = DaemonClient(self.daemon_addr)
        try:
            records, arrays_meta = checkpoint_store(self.store, client, self.id)
        finally:
            client.close()
        send_json(self.coord, REPLY_OK, {
            "records": records,
            "arrays": arrays_meta,
            "has_tiles": len(self.store.tiles) > 0,
        })

    def _handle_restore(self, meta: dict) -> None:
        manifest = read_manifest(meta["path"])
        self.worker_count = meta["worker_count"]
        store, depths = restore_store(manifest, self.id)
        if store is None:
            self.decomp = None
            self.store = None
            self.manager = None
            self.executor = None
            send_json(self.coord, REPLY_OK, {})
            return
        self.decomp = store.decomp
        self.store = store
        owner_map = owner_map_from_manifest(manifest)
        self._build_runtime(owner_map)
        self.executor.depths = depths
        send_json(self.coord, REPLY_OK, {})


def worker_main(worker_id: int, coordinator: str, scratch: str) -> None:
    try:
        # Pin round-robin across cores: keeps each worker's tiles cache-warm
        # and stops the scheduler from bouncing compute between cores on
        # every exchange wait.
        cpus = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cpus[worker_id % len(cpus)]})
    except (OSError, AttributeError):
        pass
    worker = Worker(worker_id, coordinator, scratch)
    worker.run()
