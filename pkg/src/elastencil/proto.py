"""Client/server wire protocol: framing, command codec, and the DAG codec.

Frames are length-prefixed and little-endian throughout: u32 length of the
remainder, u16 version, u16 kind, body. The byte layout is documented
bit-exactly in PROTOCOL.md; any client producing these bytes (the bundled
test client, the scripting frontend) must match it exactly, since golden
tests compare encoded DAGs byte-for-byte.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass

from .errors import (
    ProtocolError,
    VersionMismatch,
)
from .ir import (
    Dag,
    DagNode,
    EDGE_KINDS,
    SliceSpec,
    Statement,
    StencilAst,
    decode_expr,
    encode_expr,
)

VERSION = 1
MAX_FRAME = 1 << 30

# Client commands
CREATE_ARRAY = 1
SUBMIT_BATCH = 2
FETCH = 3
SYNC = 4
RESCALE = 5
SHUTDOWN = 6
GET_STATS = 7

# Server responses
ACK = 100
FETCH_RESULT = 101
RESCALE_RESULT = 102
STATS_RESULT = 103
ERROR = 104
CREATE_RESULT = 105

# Internal control plane (coordinator <-> worker/launcher/daemon)
REGISTER = 200
INIT = 201
W_CREATE = 202
W_BATCH = 203
W_FETCH = 204
W_MIGRATE = 206
W_CHECKPOINT = 207
W_RESTORE = 208
W_EXIT = 209
REPLY_OK = 220
REPLY_ERR = 221
L_RESTART = 230
L_DONE = 231
JOB_DONE = 232

# Worker peer channel
PEER_HELLO = 240
HALO = 241
TILE_DATA = 242

_HEADER = struct.Struct("<IHH")


def tune_socket(sock: socket.socket) -> socket.socket:
    """Latency tuning applied to every connection: halo rounds are small
    request/response messages, so Nagle coalescing only adds stalls."""
    try:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    except OSError:
        pass
    return sock


def connect(address: str, timeout: float = 30.0) -> socket.socket:
    host, port = address.rsplit(":", 1)
    sock = socket.create_connection((host, int(port)), timeout=timeout)
    sock.settimeout(None)
    return tune_socket(sock)


def send_frame(sock: socket.socket, kind: int, body: bytes) -> None:
    frame = _HEADER.pack(4 + len(body), VERSION, kind) + body
    sock.sendall(frame)


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = recv_exact(sock, _HEADER.size)
    length, version, kind = _HEADER.unpack(header)
    if length < 4 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    if version != VERSION:
        raise VersionMismatch(f"protocol version {version}, expected {VERSION}")
    body = recv_exact(sock, length - 4)
    return kind, body


def send_json(sock: socket.socket, kind: int, obj, blob: bytes = b"") -> None:
    """Internal-plane helper: JSON header + optional binary payload."""
    meta = json.dumps(obj, separators=(",", ":")).encode()
    send_frame(sock, kind, struct.pack("<I", len(meta)) + meta + blob)


def parse_json(body: bytes):
    (n,) = struct.unpack_from("<I", body, 0)
    meta = json.loads(body[4:4 + n].decode())
    return meta, body[4 + n:]


# ---------------------------------------------------------------------------
# Slice and DAG codec


def encode_slice(spec: SliceSpec) -> bytes:
    out = bytearray(struct.pack("<B", spec.rank))
    for start, stop in spec.bounds:
        out += struct.pack("<QQ", start, stop)
    return bytes(out)


def decode_slice(buf: bytes, pos: int) -> tuple[SliceSpec, int]:
    rank = buf[pos]
    pos += 1
    if rank not in (1, 2):
        raise ProtocolError(f"bad slice rank {rank}")
    bounds = []
    for _ in range(rank):
        start, stop = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        bounds.append((start, stop))
    return SliceSpec(tuple(bounds)), pos


def encode_dag(dag: Dag) -> bytes:
    out = bytearray()
    out += struct.pack("<I", len(dag.ast_table))
    for ast in dag.ast_table:
        expr = encode_expr(ast.root)
        out += struct.pack("<I", len(expr))
        out += expr
    out += struct.pack("<I", len(dag.nodes))
    for node in dag.nodes:
        out += struct.pack("<II", node.node_id, len(node.statements))
        for stmt in node.statements:
            out += struct.pack("<II", stmt.ast_id, stmt.output)
            out += encode_slice(stmt.output_slice)
            out += struct.pack("<I", len(stmt.inputs))
            for array in stmt.inputs:
                out += struct.pack("<I", array)
    edges = sorted(
        (a, b, EDGE_KINDS.index(kind)) for a, b, kind in dag.edges
    )
    out += struct.pack("<I", len(edges))
    for a, b, kind in edges:
        out += struct.pack("<IIB", a, b, kind)
    return bytes(out)


def decode_dag(buf: bytes) -> Dag:
    try:
        return _decode_dag(buf)
    except (struct.error, IndexError, ValueError) as exc:
        raise ProtocolError(f"malformed dag bytes: {exc}") from exc


def _decode_dag(buf: bytes) -> Dag:
    pos = 0
    (n_asts,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    ast_table = []
    for _ in range(n_asts):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        root, end = decode_expr(buf[pos:pos + n], 0)
        if end != n:
            raise ProtocolError("trailing bytes in expression")
        ast_table.append(StencilAst.create(root))
        pos += n
    (n_nodes,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    nodes = []
    for _ in range(n_nodes):
        node_id, n_stmts = struct.unpack_from("<II", buf, pos)
        pos += 8
        statements = []
        for _ in range(n_stmts):
            ast_id, output = struct.unpack_from("<II", buf, pos)
            pos += 8
            out_slice, pos = decode_slice(buf, pos)
            (n_inputs,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            inputs = struct.unpack_from(f"<{n_inputs}I", buf, pos) if n_inputs else ()
            pos += 4 * n_inputs
            statements.append(Statement(ast_id, output, out_slice, tuple(inputs)))
        nodes.append(DagNode(node_id, statements))
    (n_edges,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    edges = set()
    for _ in range(n_edges):
        a, b, kind = struct.unpack_from("<IIB", buf, pos)
        pos += 9
        if kind >= len(EDGE_KINDS):
            raise ProtocolError(f"bad edge kind {kind}")
        edges.add((a, b, EDGE_KINDS[kind]))
    if pos != len(buf):
        raise ProtocolError("trailing bytes after dag")
    return Dag(nodes, edges, ast_table)


# ---------------------------------------------------------------------------
# Client command codec


@dataclass(frozen=True)
class Command:
    seq: int
    kind: int
    array: int = 0
    shape: tuple[int, ...] = ()
    dag_bytes: bytes = b""
    slice: SliceSpec | None = None
    count: int = 0


def encode_command(cmd: Command) -> tuple[int, bytes]:
    body = bytearray(struct.pack("<Q", cmd.seq))
    if cmd.kind == CREATE_ARRAY:
        # The server assigns the array id and returns it in CREATE_RESULT.
        body += struct.pack("<B", len(cmd.shape))
        for extent in cmd.shape:
            body += struct.pack("<Q", extent)
    elif cmd.kind == SUBMIT_BATCH:
        body += cmd.dag_bytes
    elif cmd.kind == FETCH:
        body += struct.pack("<I", cmd.array)
        body += encode_slice(cmd.slice)
    elif cmd.kind == RESCALE:
        body += struct.pack("<I", cmd.count)
    elif cmd.kind in (SYNC, SHUTDOWN, GET_STATS):
        pass
    else:
        raise ProtocolError(f"unknown command kind {cmd.kind}")
    return cmd.kind, bytes(body)


def decode_command(kind: int, body: bytes) -> Command:
    try:
        (seq,) = struct.unpack_from("<Q", body, 0)
        pos = 8
        if kind == CREATE_ARRAY:
            rank = body[pos]
            pos += 1
            shape = []
            for _ in range(rank):
                (extent,) = struct.unpack_from("<Q", body, pos)
                pos += 8
                shape.append(extent)
            return Command(seq, kind, shape=tuple(shape))
        if kind == SUBMIT_BATCH:
            return Command(seq, kind, dag_bytes=body[pos:])
        if kind == FETCH:
            (array,) = struct.unpack_from("<I", body, pos)
            spec, end = decode_slice(body, pos + 4)
            if end != len(body):
                raise ProtocolError("trailing bytes in fetch")
            return Command(seq, kind, array=array, slice=spec)
        if kind == RESCALE:
            (count,) = struct.unpack_from("<I", body, pos)
            return Command(seq, kind, count=count)
        if kind in (SYNC, SHUTDOWN, GET_STATS):
            return Command(seq, kind)
    except struct.error as exc:
        raise ProtocolError(f"short command body: {exc}") from exc
    raise ProtocolError(f"unknown command kind {kind}")


# ---------------------------------------------------------------------------
# Response codec


def encode_ack(seq: int) -> tuple[int, bytes]:
    return ACK, struct.pack("<Q", seq)


def encode_error(seq: int, code: int, message: str) -> tuple[int, bytes]:
    msg = message.encode()[:4096]
    return ERROR, struct.pack("<QHH", seq, code, len(msg)) + msg


def encode_fetch_result(seq: int, shape: tuple[int, ...], payload: bytes):
    body = bytearray(struct.pack("<QB", seq, len(shape)))
    for extent in shape:
        body += struct.pack("<Q", extent)
    body += payload
    return FETCH_RESULT, bytes(body)


def encode_rescale_result(seq: int, timings: tuple[float, float, float, float]):
    return RESCALE_RESULT, struct.pack("<Qdddd", seq, *timings)


def encode_stats_result(seq: int, stats: dict) -> tuple[int, bytes]:
    blob = json.dumps(stats, separators=(",", ":")).encode()
    return STATS_RESULT, struct.pack("<Q", seq) + blob


def encode_create_result(seq: int, array: int) -> tuple[int, bytes]:
    return CREATE_RESULT, struct.pack("<QI", seq, array)


@dataclass(frozen=True)
class Response:
    seq: int
    kind: int
    payload: bytes = b""
    shape: tuple[int, ...] = ()
    code: int = 0
    message: str = ""
    timings: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    stats: dict | None = None
    array: int = 0


def decode_response(kind: int, body: bytes) -> Response:
    (seq,) = struct.unpack_from("<Q", body, 0)
    if kind == ACK:
        return Response(seq, kind)
    if kind == ERROR:
        _, code, n = struct.unpack_from("<QHH", body, 0)
        msg = body[12:12 + n].decode()
        return Response(seq, kind, code=code, message=msg)
    if kind == FETCH_RESULT:
        rank = body[8]
        pos = 9
        shape = []
        for _ in range(rank):
            (extent,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            shape.append(extent)
        return Response(seq, kind, shape=tuple(shape), payload=body[pos:])
    if kind == RESCALE_RESULT:
        _, lb, ck, rs, ro = struct.unpack("<Qdddd", body)
        return Response(seq, kind, timings=(lb, ck, rs, ro))
    if kind == STATS_RESULT:
        return Response(seq, kind, stats=json.loads(body[8:].decode()))
    if kind == CREATE_RESULT:
        _, array = struct.unpack("<QI", body)
        return Response(seq, kind, array=array)
    raise ProtocolError(f"unknown response kind {kind}")
