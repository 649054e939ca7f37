"""Protocol client: a low-level session plus a batching program sink.

Session is the raw command surface. BatchingSession adds the lazy statement
stream used by tests and the benchmark harness: statements accumulate until
the flush depth is reached, then the batch is (optionally) fused and shipped
without waiting for execution, which is what pipelines the client against
the server.
"""

from __future__ import annotations

import os
import socket
import threading

import numpy as np

from . import proto
from .elastic import StageTimings
from .errors import ElastencilError, InvalidShape, error_from_code
from .ir import Const, DagBuilder, SliceSpec, StencilAst, fuse, full_slice, normalize_slice
from .proto import Command, Response

DEFAULT_ENDPOINT_VAR = "ELASTENCIL_ENDPOINT"


class Session:
    """One connection to a coordinator; thread-confined except for the reader."""

    def __init__(self, endpoint: str | None = None, timeout: float = 600.0):
        endpoint = endpoint or os.environ.get(DEFAULT_ENDPOINT_VAR)
        if not endpoint:
            raise ValueError(
                f"no endpoint given and {DEFAULT_ENDPOINT_VAR} unset"
            )
        host, port = endpoint.rsplit(":", 1)
        self._sock = proto.tune_socket(
            socket.create_connection((host, int(port)), timeout=30)
        )
        self._sock.settimeout(timeout)
        self._seq = 0
        self._responses: dict[int, Response] = {}
        self._resp_cond = threading.Condition()
        self._reader_error: Exception | None = None
        self._closed = False
        threading.Thread(target=self._reader, daemon=True).start()

    def _reader(self) -> None:
        try:
            while True:
                kind, body = proto.recv_frame(self._sock)
                response = proto.decode_response(kind, body)
                with self._resp_cond:
                    self._responses[response.seq] = response
                    self._resp_cond.notify_all()
        except Exception as exc:
            with self._resp_cond:
                self._reader_error = exc
                self._resp_cond.notify_all()

    def _send(self, cmd: Command) -> int:
        kind, body = proto.encode_command(cmd)
        proto.send_frame(self._sock, kind, body)
        return cmd.seq

    def _next_seq(self) -> int:
        seq = self._seq
        self._seq += 1
        return seq

    def _wait(self, seq: int, timeout: float = 600.0) -> Response:
        with self._resp_cond:
            while seq not in self._responses:
                if self._reader_error is not None:
                    raise ConnectionError(
                        f"session reader failed: {self._reader_error}"
                    )
                if not self._resp_cond.wait(timeout):
                    raise TimeoutError(f"no response for seq {seq}")
            response = self._responses.pop(seq)
        if response.kind == proto.ERROR:
            raise error_from_code(response.code, response.message)
        return response

    # -- commands ----------------------------------------------------------

    def create_array(self, shape) -> int:
        shape = tuple(int(e) for e in shape)
        if len(shape) not in (1, 2) or any(e <= 0 for e in shape):
            raise InvalidShape(f"positive extents required, got {shape}")
        seq = self._send(Command(self._next_seq(), proto.CREATE_ARRAY,
                                 shape=shape))
        return self._wait(seq).array

    def submit_batch(self, dag_bytes: bytes) -> int:
        """Asynchronous: returns once the batch is on the wire."""
        return self._send(Command(self._next_seq(), proto.SUBMIT_BATCH,
                                  dag_bytes=dag_bytes))

    def sync(self) -> None:
        seq = self._send(Command(self._next_seq(), proto.SYNC))
        self._wait(seq)
        self._drain_acks()

    def fetch(self, array: int, spec: SliceSpec) -> np.ndarray:
        seq = self._send(Command(self._next_seq(), proto.FETCH,
                                 array=array, slice=spec))
        response = self._wait(seq)
        self._drain_acks()
        return np.frombuffer(response.payload, dtype="<f8").reshape(response.shape)

    def rescale(self, count: int) -> StageTimings:
        if count < 1:
            raise ElastencilError(f"worker count {count} must be >= 1")
        seq = self._send(Command(self._next_seq(), proto.RESCALE, count=count))
        response = self._wait(seq, timeout=600.0)
        self._drain_acks()
        return StageTimings(*response.timings)

    def stats(self) -> dict:
        seq = self._send(Command(self._next_seq(), proto.GET_STATS))
        response = self._wait(seq)
        self._drain_acks()
        return response.stats or {}

    def shutdown(self) -> None:
        if self._closed:
            return
        try:
            seq = self._send(Command(self._next_seq(), proto.SHUTDOWN))
            self._wait(seq, timeout=30.0)
        finally:
            self.close()

    def close(self) -> None:
        self._closed = True
        try:
            # shutdown() actually terminates the connection even while the
            # reader thread is blocked in recv on this socket; a bare close
            # would leave the fd alive inside that syscall and never send FIN.
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def _drain_acks(self) -> None:
        # Batch acks arrive asynchronously; a synchronizing call means every
        # earlier command has been answered, so drop buffered acks and
        # surface any buffered error.
        with self._resp_cond:
            stale = list(self._responses.values())
            self._responses.clear()
        for response in stale:
            if response.kind == proto.ERROR:
                raise error_from_code(response.code, response.message)


class BatchingSession:
    """Program sink over a Session with a flush-depth policy.

    Mirrors the lazy frontend semantics: statements accumulate client-side;
    when the pending node count reaches the flush depth the batch is fused
    (unless disabled) and submitted asynchronously. Creating an array sends
    the create command eagerly and also records the creation node in the
    pending DAG.
    """

    def __init__(self, session: Session, flush_depth: int = 100,
                 fuse_batches: bool = True):
        self.session = session
        self.flush_depth = max(1, flush_depth)
        self.fuse_batches = fuse_batches
        self.shapes: dict[int, tuple[int, ...]] = {}
        self.batches_submitted = 0
        self._builder = DagBuilder(self.shapes)

    def create_array(self, shape) -> int:
        array = self.session.create_array(shape)
        shape = tuple(int(e) for e in shape)
        self._builder.declare_array(array, shape)
        stmt = self._builder.build_statement(
            StencilAst.create(Const(0.0)), array, full_slice(shape), []
        )
        self._builder.add_statement(stmt)
        self._maybe_flush()
        return array

    def assign(self, array: int, raw_slice, expr) -> None:
        self._builder.add(expr, array, raw_slice)
        self._maybe_flush()

    def _maybe_flush(self) -> None:
        if len(self._builder.dag.nodes) >= self.flush_depth:
            self.flush()

    def flush(self) -> None:
        dag = self._builder.dag
        if not dag.nodes:
            return
        if self.fuse_batches:
            dag = fuse(dag)
        self.session.submit_batch(proto.encode_dag(dag))
        self.batches_submitted += 1
        self._builder = DagBuilder(self.shapes)

    def sync(self) -> None:
        self.flush()
        self.session.sync()

    def fetch(self, array: int, raw_slice=None) -> np.ndarray:
        self.flush()
        if raw_slice is None:
            spec = full_slice(self.shapes[array])
        else:
            spec = normalize_slice(raw_slice, self.shapes[array])
        return self.session.fetch(array, spec)

    def rescale(self, count: int) -> StageTimings:
        self.flush()
        return self.session.rescale(count)

    def stats(self) -> dict:
        self.flush()
        return self.session.stats()
