"""Integration tests against launcher-spawned processes over the real wire."""

import os
import socket
import struct
import time

import numpy as np
import pytest

from elastencil.client import BatchingSession, Session
from elastencil.errors import (
    InvalidShape,
    IndivisibleShape,
    OffsetExceedsTileWidth,
    PortInUse,
    SelfDependency,
    SessionFailed,
    UnknownArray,
)
from elastencil.ir import cst, ref
from elastencil.launcher import JobConfig, Launcher
from elastencil.oracle import laplace_reference
from elastencil.programs import laplace_program
from elastencil import proto


@pytest.fixture(scope="module")
def job():
    with Launcher(JobConfig(workers=2, odf=2)) as launcher:
        yield launcher


@pytest.fixture()
def session(job):
    s = Session(job.client_endpoint)
    yield BatchingSession(s, flush_depth=50)
    s.close()


def test_laplace_over_wire(session):
    names = laplace_program(session, 32, 10)
    got = session.fetch(names["u"])
    np.testing.assert_array_equal(got, laplace_reference(32, 10))


def test_fetch_slices(session):
    a = session.create_array((32, 32))
    session.assign(a, (slice(None), slice(None)), cst(7.5))
    session.assign(a, (slice(4, 12), slice(16, 24)), cst(-1.0))
    full = session.fetch(a)
    assert full.shape == (32, 32)
    # A single element.
    one = session.fetch(a, (5, 17))
    assert one.shape == (1, 1) and one[0, 0] == -1.0
    # A window spanning all four tiles.
    window = session.fetch(a, (slice(8, 24), slice(8, 24)))
    np.testing.assert_array_equal(window, full[8:24, 8:24])


def test_sync_with_nothing_pending(session):
    session.sync()
    session.sync()


def test_empty_batch_is_ack_noop(session):
    from elastencil.ir import Dag

    session.session.submit_batch(proto.encode_dag(Dag([], set(), [])))
    session.sync()


def test_rank1_over_wire(session):
    a = session.create_array((64,))
    b = session.create_array((64,))
    session.assign(a, ((0, 40),), cst(2.0))
    session.assign(b, ((1, 63),), ref(a, ((0, 62),)))
    got = session.fetch(b)
    expected = np.zeros(64)
    expected[1:41] = 2.0
    np.testing.assert_array_equal(got, expected)


def test_unknown_array_rejected(session):
    with pytest.raises(UnknownArray):
        session.session.fetch(9999, proto.SliceSpec(((0, 1), (0, 1))))


def test_self_dependency_raised_client_side(session):
    a = session.create_array((16, 16))
    with pytest.raises(SelfDependency):
        session.assign(a, (slice(None), slice(None)),
                       ref(a, (slice(None), slice(None))))


def test_create_array_rejects_bad_shape(session):
    with pytest.raises(InvalidShape):
        session.create_array((0, 4))
    with pytest.raises(InvalidShape):
        session.create_array((4, 4, 4))


def test_indivisible_shape_rejected(session):
    with pytest.raises(IndivisibleShape):
        session.create_array((33, 32))  # 4 tiles -> 2x2 grid


def test_fuzzed_frames_do_not_kill_server(job, session):
    # Run garbage through fresh connections; the live session must survive.
    host, port = job.client_endpoint.rsplit(":", 1)
    rng = np.random.default_rng(0)
    for _ in range(30):
        sock = socket.create_connection((host, int(port)))
        n = int(rng.integers(0, 64))
        sock.sendall(rng.bytes(n))
        sock.close()
    # Truncated but well-formed header claiming a longer body.
    sock = socket.create_connection((host, int(port)))
    sock.sendall(struct.pack("<IHH", 100, proto.VERSION, proto.SYNC))
    sock.close()
    # Oversized length field.
    sock = socket.create_connection((host, int(port)))
    sock.sendall(struct.pack("<IHH", 0x7FFFFFFF, proto.VERSION, proto.SYNC))
    sock.close()
    time.sleep(0.1)
    a = session.create_array((8, 8))
    session.assign(a, (slice(None), slice(None)), cst(1.0))
    assert session.fetch(a)[0, 0] == 1.0


def test_version_mismatch_reported(job):
    host, port = job.client_endpoint.rsplit(":", 1)
    sock = socket.create_connection((host, int(port)))
    body = struct.pack("<Q", 0)
    sock.sendall(struct.pack("<IHH", 4 + len(body), 999, proto.SYNC) + body)
    kind, reply = proto.recv_frame(sock)
    response = proto.decode_response(kind, reply)
    assert kind == proto.ERROR
    from elastencil.errors import VersionMismatch

    assert response.code == VersionMismatch.code
    sock.close()


def test_sequence_gap_rejected(job):
    s = Session(job.client_endpoint)
    s._seq = 5  # skip ahead; server expects 0
    with pytest.raises(Exception):
        s.create_array((8, 8))
    s.close()


def test_batch_error_surfaces_on_sync():
    with Launcher(JobConfig(workers=2, odf=2)) as job:
        s = Session(job.client_endpoint)
        session = BatchingSession(s, flush_depth=10)
        a = session.create_array((8, 8))
        b = session.create_array((8, 8))
        # 4 tiles -> 2x2 grid -> 4x4 tiles; depth 3 < 4 fits, 4 does not...
        # use a shift of 4 to exceed: 8x8 over 2x2 tiles of 4x4, depth 4 >= 4.
        session.assign(b, (slice(4, None), slice(None)),
                       ref(a, (slice(None, -4), slice(None))))
        with pytest.raises(OffsetExceedsTileWidth):
            session.sync()
        # Session is poisoned; later commands fail fast.
        with pytest.raises(SessionFailed):
            session.fetch(a)
        s.close()


def test_rescale_identity_and_empty():
    with Launcher(JobConfig(workers=2, max_workers=2)) as job:
        s = Session(job.client_endpoint)
        session = BatchingSession(s, flush_depth=10)
        # Rescale with no arrays at all: stages still run.
        timings = session.rescale(2)
        assert timings.restart_ms > 0
        a = session.create_array((16, 16))
        session.assign(a, (slice(None), slice(None)), cst(3.25))
        # Identity rescale with data.
        timings = session.rescale(2)
        assert timings.restart_ms > 0
        got = session.fetch(a)
        assert (got == 3.25).all()
        s.shutdown()


def test_rescale_unavailable_count():
    with Launcher(JobConfig(workers=2, max_workers=2)) as job:
        s = Session(job.client_endpoint)
        from elastencil.errors import RescaleUnavailable

        with pytest.raises(RescaleUnavailable):
            s.rescale(4)
        s.shutdown()


def test_shutdown_kills_every_process():
    launcher = Launcher(JobConfig(workers=2, max_workers=3))
    launcher.start()
    pids = launcher.all_pids()
    assert len(pids) == 1 + 3 + 2  # coordinator + daemons + workers
    s = Session(launcher.client_endpoint)
    s.shutdown()
    assert launcher.wait_done(10)
    launcher.shutdown()
    for pid in pids:
        with pytest.raises(ProcessLookupError):
            os.kill(pid, 0)


def test_port_in_use():
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    port = blocker.getsockname()[1]
    blocker.listen(1)
    try:
        with pytest.raises(PortInUse):
            Launcher(JobConfig(workers=1, endpoint=f"127.0.0.1:{port}")).start()
    finally:
        blocker.close()


def test_server_rejects_tampered_dag(job):
    # Valid encoding, wrong edge set: must fail the server-side re-check.
    from elastencil.errors import MalformedDag
    from elastencil.ir import Dag
    from elastencil.programs import DagProgram, laplace_program

    s = Session(job.client_endpoint)
    session = BatchingSession(s, flush_depth=1000)
    ids = [session.create_array((16, 16)) for _ in range(2)]

    prog = DagProgram()
    laplace_program(prog, 16, 2)
    from test_acceptance import remap_arrays

    mapping = {aid: ids[i % 2] for i, aid in enumerate(prog.shapes)}
    dag = remap_arrays(prog.dag, mapping)
    tampered = Dag(dag.nodes, set(), dag.ast_table)  # drop every edge
    s.submit_batch(proto.encode_dag(tampered))
    with pytest.raises(MalformedDag):
        s.sync()
    s.close()


def test_expand_above_initial_count():
    # Tiles are fixed at odf x initial workers; expanding beyond that leaves
    # some workers tile-less but must stay correct.
    from elastencil.oracle import laplace_reference
    from elastencil.programs import laplace_iteration_statements, laplace_program

    with Launcher(JobConfig(workers=2, max_workers=4)) as job:
        s = Session(job.client_endpoint)
        session = BatchingSession(s, flush_depth=25)
        names = laplace_program(session, 32, 10)
        timings = session.rescale(4)
        assert timings.restart_ms > 0
        names = laplace_iteration_statements(
            session, names["u"], names["scratch"], 10
        )
        got = session.fetch(names["u"])
        np.testing.assert_array_equal(got, laplace_reference(32, 20))
        s.shutdown()


def test_expand_then_immediate_shrink_bitwise():
    from elastencil.oracle import laplace_reference
    from elastencil.programs import laplace_iteration_statements, laplace_program

    with Launcher(JobConfig(workers=2, max_workers=4, odf=2)) as job:
        s = Session(job.client_endpoint)
        session = BatchingSession(s, flush_depth=25)
        names = laplace_program(session, 32, 7)
        session.rescale(4)
        session.rescale(2)
        names = laplace_iteration_statements(
            session, names["u"], names["scratch"], 7
        )
        got = session.fetch(names["u"])
        np.testing.assert_array_equal(got, laplace_reference(32, 14))
        s.shutdown()
