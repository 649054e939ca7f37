"""Memory daemon: holds tile payloads across worker process restarts.

One daemon per node (one per worker slot at desk scale), spawned by the
launcher at job start and kept alive through every rescale. Workers push
payloads before a restart and pull them back after; the daemon owns the only
copy in between. Protocol: length-prefixed frames with STORE -> allocation
id, RETRIEVE (returns and frees), FREE, PING, and STATS for tests.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading

from .errors import DaemonUnreachable, UnknownAllocation
from .proto import recv_frame, send_frame, tune_socket

D_STORE = 250
D_RETRIEVE = 251
D_FREE = 252
D_PING = 253
D_STATS = 254
D_OK = 255
D_ERR = 256


class MemoryDaemon:
    """Thread-per-connection store of opaque payload buffers."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._lock = threading.Lock()
        self._next_id = 1
        self._blobs: dict[int, bytes] = {}
        daemon = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                try:
                    while True:
                        kind, body = recv_frame(self.request)
                        daemon._dispatch(self.request, kind, body)
                except (ConnectionError, OSError):
                    return

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self.address = "%s:%d" % self._server.server_address

    def _dispatch(self, sock, kind: int, body: bytes) -> None:
        if kind == D_STORE:
            with self._lock:
                alloc_id = self._next_id
                self._next_id += 1
                self._blobs[alloc_id] = body
            send_frame(sock, D_OK, struct.pack("<Q", alloc_id))
        elif kind == D_RETRIEVE:
            (alloc_id,) = struct.unpack("<Q", body)
            with self._lock:
                blob = self._blobs.pop(alloc_id, None)
            if blob is None:
                send_frame(sock, D_ERR, b"unknown allocation")
            else:
                send_frame(sock, D_OK, blob)
        elif kind == D_FREE:
            (alloc_id,) = struct.unpack("<Q", body)
            with self._lock:
                known = self._blobs.pop(alloc_id, None) is not None
            if known:
                send_frame(sock, D_OK, b"")
            else:
                send_frame(sock, D_ERR, b"unknown allocation")
        elif kind == D_PING:
            send_frame(sock, D_OK, b"")
        elif kind == D_STATS:
            with self._lock:
                count = len(self._blobs)
                total = sum(len(b) for b in self._blobs.values())
            send_frame(sock, D_OK, struct.pack("<QQ", count, total))
        else:
            send_frame(sock, D_ERR, b"bad request")

    def serve_forever(self) -> None:
        self._server.serve_forever(poll_interval=0.2)

    def serve_in_thread(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class DaemonClient:
    """One connection to a memory daemon; not thread-safe, use per thread."""

    def __init__(self, address: str):
        self.address = address
        host, port = address.rsplit(":", 1)
        try:
            self._sock = tune_socket(
                socket.create_connection((host, int(port)), timeout=30)
            )
            self._sock.settimeout(600)
        except OSError as exc:
            raise DaemonUnreachable(f"cannot reach daemon at {address}: {exc}")

    def _call(self, kind: int, body: bytes) -> bytes:
        try:
            send_frame(self._sock, kind, body)
            reply_kind, reply = recv_frame(self._sock)
        except (OSError, ConnectionError) as exc:
            raise DaemonUnreachable(f"daemon {self.address} failed: {exc}")
        if reply_kind == D_ERR:
            raise UnknownAllocation(reply.decode(errors="replace"))
        return reply

    def store(self, payload: bytes) -> int:
        reply = self._call(D_STORE, payload)
        return struct.unpack("<Q", reply)[0]

    def retrieve_and_free(self, alloc_id: int) -> bytes:
        return self._call(D_RETRIEVE, struct.pack("<Q", alloc_id))

    def free(self, alloc_id: int) -> None:
        self._call(D_FREE, struct.pack("<Q", alloc_id))

    def ping(self) -> bool:
        self._call(D_PING, b"")
        return True

    def stats(self) -> tuple[int, int]:
        reply = self._call(D_STATS, b"")
        return struct.unpack("<QQ", reply)

    def close(self) -> None:
        self._sock.close()
