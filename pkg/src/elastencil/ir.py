"""Program representation: parameterized ASTs, statements, and the dependency DAG.

A statement assigns the value of an expression tree to a slice of an output
array. The tree is *parameterized*: array operands are formal slots, so one
tree can be reused by many statements with different array bindings. A batch
of statements forms a DAG whose edges are array-level true/anti/output
dependencies; the fusion pass merges consecutive dependency-free nodes of
equal output extent into multi-statement nodes.

All slices are normalized (0 <= start < stop <= extent, step 1) at statement
build time, so everything downstream sees concrete non-negative bounds.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from .errors import (
    InvalidSlice,
    MalformedDag,
    SelfDependency,
    ShapeMismatch,
    StridedSlice,
    UnsupportedOp,
)

ArrayId = int
Shape = tuple[int, ...]

UNARY_OPS = ("neg", "abs", "sqrt")
BINARY_OPS = ("add", "sub", "mul", "div")

EDGE_TRUE = "true"
EDGE_ANTI = "anti"
EDGE_OUTPUT = "output"
EDGE_KINDS = (EDGE_TRUE, EDGE_ANTI, EDGE_OUTPUT)


# ---------------------------------------------------------------------------
# Slices


@dataclass(frozen=True)
class SliceSpec:
    """Normalized rank-1 or rank-2 slice: per-dimension (start, stop), step 1."""

    bounds: tuple[tuple[int, int], ...]

    @property
    def rank(self) -> int:
        return len(self.bounds)

    @property
    def extent(self) -> tuple[int, ...]:
        return tuple(stop - start for start, stop in self.bounds)

    @property
    def starts(self) -> tuple[int, ...]:
        return tuple(start for start, _ in self.bounds)

    def validate_against(self, shape: Shape) -> None:
        if len(self.bounds) != len(shape):
            raise ShapeMismatch(
                f"rank-{len(self.bounds)} slice applied to rank-{len(shape)} array"
            )
        for (start, stop), extent in zip(self.bounds, shape):
            if not (0 <= start < stop <= extent):
                raise InvalidSlice(
                    f"slice [{start}:{stop}] out of range for extent {extent}"
                )

    def __str__(self) -> str:
        return ",".join(f"{a}:{b}" for a, b in self.bounds)


def normalize_slice(raw, shape: Shape) -> SliceSpec:
    """Normalize a python-style slice tuple against a concrete shape.

    ``raw`` is a tuple with one entry per dimension; each entry is an int
    (selects a single index), a (start, stop) pair with None/negative values
    allowed, or a builtin slice. Steps other than 1 are rejected.
    """
    if not isinstance(raw, tuple):
        raw = (raw,)
    if len(raw) != len(shape):
        raise ShapeMismatch(
            f"slice has {len(raw)} dims, array has {len(shape)}"
        )
    bounds = []
    for item, extent in zip(raw, shape):
        if isinstance(item, slice):
            if item.step not in (None, 1):
                raise StridedSlice(f"step {item.step} not supported")
            start, stop = item.start, item.stop
        elif isinstance(item, int):
            start = item
            stop = None if item == -1 else item + 1
        else:
            start, stop = item
        start = 0 if start is None else start
        stop = extent if stop is None else stop
        if start < 0:
            start += extent
        if stop < 0:
            stop += extent
        if not (0 <= start < stop <= extent):
            raise InvalidSlice(
                f"slice [{start}:{stop}] invalid for extent {extent}"
            )
        bounds.append((start, stop))
    return SliceSpec(tuple(bounds))


def full_slice(shape: Shape) -> SliceSpec:
    return SliceSpec(tuple((0, n) for n in shape))


# ---------------------------------------------------------------------------
# Expression trees


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class SlotRef:
    slot: int
    slice: SliceSpec


@dataclass(frozen=True)
class Unary:
    op: str
    child: "AstExpr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "AstExpr"
    right: "AstExpr"


AstExpr = Const | SlotRef | Unary | Binary


def _encode_expr(expr: AstExpr, out: bytearray) -> None:
    # Canonical preorder encoding; doubles as the wire format and as the
    # input to the structural hash. Constants hash by bit pattern.
    if isinstance(expr, Const):
        out.append(0)
        out += struct.pack("<d", expr.value)
    elif isinstance(expr, SlotRef):
        out.append(1)
        out += struct.pack("<IB", expr.slot, expr.slice.rank)
        for start, stop in expr.slice.bounds:
            out += struct.pack("<QQ", start, stop)
    elif isinstance(expr, Unary):
        out.append(2)
        out.append(UNARY_OPS.index(expr.op))
        _encode_expr(expr.child, out)
    elif isinstance(expr, Binary):
        out.append(3)
        out.append(BINARY_OPS.index(expr.op))
        _encode_expr(expr.left, out)
        _encode_expr(expr.right, out)
    else:
        raise UnsupportedOp(f"unknown expression node {expr!r}")


def encode_expr(expr: AstExpr) -> bytes:
    out = bytearray()
    _encode_expr(expr, out)
    return bytes(out)


def decode_expr(buf: bytes, pos: int = 0) -> tuple[AstExpr, int]:
    if pos >= len(buf):
        raise UnsupportedOp("truncated expression")
    tag = buf[pos]
    pos += 1
    if tag == 0:
        (value,) = struct.unpack_from("<d", buf, pos)
        return Const(value), pos + 8
    if tag == 1:
        slot, rank = struct.unpack_from("<IB", buf, pos)
        pos += 5
        bounds = []
        for _ in range(rank):
            start, stop = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            bounds.append((start, stop))
        return SlotRef(slot, SliceSpec(tuple(bounds))), pos
    if tag == 2:
        op = UNARY_OPS[buf[pos]]
        child, pos = decode_expr(buf, pos + 1)
        return Unary(op, child), pos
    if tag == 3:
        op = BINARY_OPS[buf[pos]]
        left, pos = decode_expr(buf, pos + 1)
        right, pos = decode_expr(buf, pos)
        return Binary(op, left, right), pos
    raise UnsupportedOp(f"unknown expression tag {tag}")


def walk_expr(expr: AstExpr):
    """Yield every node of the tree in preorder."""
    stack = [expr]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Unary):
            stack.append(node.child)
        elif isinstance(node, Binary):
            stack.append(node.right)
            stack.append(node.left)


@dataclass(frozen=True)
class StencilAst:
    """Expression tree over formal array slots, deduplicated by structure."""

    root: AstExpr
    arity: int
    structural_hash: int

    @staticmethod
    def create(root: AstExpr) -> "StencilAst":
        slots = {n.slot for n in walk_expr(root) if isinstance(n, SlotRef)}
        arity = (max(slots) + 1) if slots else 0
        if slots != set(range(arity)):
            raise MalformedDag(f"slots {sorted(slots)} are not dense 0..{arity - 1}")
        payload = encode_expr(root) + struct.pack("<I", arity)
        digest = hashlib.blake2b(payload, digest_size=8).digest()
        return StencilAst(root, arity, struct.unpack("<Q", digest)[0])


# ---------------------------------------------------------------------------
# Statements and the DAG


@dataclass(frozen=True)
class Statement:
    ast_id: int
    output: ArrayId
    output_slice: SliceSpec
    inputs: tuple[ArrayId, ...]


@dataclass
class DagNode:
    node_id: int
    statements: list[Statement]

    @property
    def writes(self) -> set[ArrayId]:
        return {s.output for s in self.statements}

    @property
    def reads(self) -> set[ArrayId]:
        out: set[ArrayId] = set()
        for s in self.statements:
            out.update(s.inputs)
        return out

    @property
    def output_extent(self) -> tuple[int, ...]:
        return self.statements[0].output_slice.extent


@dataclass
class Dag:
    nodes: list[DagNode] = field(default_factory=list)
    edges: set[tuple[int, int, str]] = field(default_factory=set)
    ast_table: list[StencilAst] = field(default_factory=list)


def compute_edges(nodes: list[DagNode]) -> set[tuple[int, int, str]]:
    """Array-level dependency edges between every ordered node pair.

    An edge exists iff the pair shares an array with at least one write:
    earlier-write/later-read is a true dependency, earlier-read/later-write
    an anti dependency, write/write an output dependency. Tracked through
    per-array reader/writer indexes so the cost is proportional to the edge
    count, not the node-pair count.
    """
    edges: set[tuple[int, int, str]] = set()
    readers: dict[ArrayId, list[int]] = {}
    writers: dict[ArrayId, list[int]] = {}
    for node in nodes:
        nid = node.node_id
        reads = node.reads
        writes = node.writes
        for array in reads:
            for w in writers.get(array, ()):
                edges.add((w, nid, EDGE_TRUE))
        for array in writes:
            for r in readers.get(array, ()):
                edges.add((r, nid, EDGE_ANTI))
            for w in writers.get(array, ()):
                edges.add((w, nid, EDGE_OUTPUT))
        for array in reads:
            readers.setdefault(array, []).append(nid)
        for array in writes:
            writers.setdefault(array, []).append(nid)
    return edges


class DagBuilder:
    """Accumulates validated statements into a Dag.

    Tracks array shapes (needed for normalization checks) and deduplicates
    ASTs by structural hash, falling back to a full structural comparison on
    hash hits so dedup can never conflate distinct trees.
    """

    def __init__(self, shapes: dict[ArrayId, Shape] | None = None):
        # Held by reference: callers that rebuild builders per batch keep one
        # shared shape registry.
        self.shapes: dict[ArrayId, Shape] = shapes if shapes is not None else {}
        self.dag = Dag()
        self._ast_index: dict[int, int] = {}
        self._readers: dict[ArrayId, list[int]] = {}
        self._writers: dict[ArrayId, list[int]] = {}

    def declare_array(self, array: ArrayId, shape: Shape) -> None:
        self.shapes[array] = tuple(shape)

    def intern_ast(self, ast: StencilAst) -> int:
        idx = self._ast_index.get(ast.structural_hash)
        if idx is not None:
            if self.dag.ast_table[idx].root != ast.root:
                raise MalformedDag("structural hash collision")
            return idx
        self.dag.ast_table.append(ast)
        self._ast_index[ast.structural_hash] = len(self.dag.ast_table) - 1
        return len(self.dag.ast_table) - 1

    def build_statement(
        self,
        ast: StencilAst,
        output: ArrayId,
        output_slice: SliceSpec,
        inputs: list[ArrayId],
    ) -> Statement:
        if len(inputs) != ast.arity:
            raise ShapeMismatch(
                f"{len(inputs)} bindings for arity-{ast.arity} ast"
            )
        if output in inputs:
            raise SelfDependency(
                f"array {output} appears as both output and input"
            )
        output_slice.validate_against(self.shapes[output])
        extent = output_slice.extent
        for array in inputs:
            # Halo locality assumes corresponding elements of every array in
            # a statement live on the same tile, i.e. one global shape.
            if self.shapes[array] != self.shapes[output]:
                raise ShapeMismatch(
                    f"array {array} shape {self.shapes[array]} differs from "
                    f"output shape {self.shapes[output]}"
                )
        for node in walk_expr(ast.root):
            if isinstance(node, SlotRef):
                node.slice.validate_against(self.shapes[inputs[node.slot]])
                if node.slice.extent != extent:
                    raise ShapeMismatch(
                        f"input extent {node.slice.extent} != output extent {extent}"
                    )
        return Statement(self.intern_ast(ast), output, output_slice, tuple(inputs))

    def add_statement(self, stmt: Statement) -> int:
        """Append a single-statement node and wire up dependency edges."""
        node = DagNode(len(self.dag.nodes), [stmt])
        nid = node.node_id
        reads = node.reads
        writes = node.writes
        for array in reads:
            for w in self._writers.get(array, ()):
                self.dag.edges.add((w, nid, EDGE_TRUE))
        for array in writes:
            for r in self._readers.get(array, ()):
                self.dag.edges.add((r, nid, EDGE_ANTI))
            for w in self._writers.get(array, ()):
                self.dag.edges.add((w, nid, EDGE_OUTPUT))
        for array in reads:
            self._readers.setdefault(array, []).append(nid)
        for array in writes:
            self._writers.setdefault(array, []).append(nid)
        self.dag.nodes.append(node)
        return node.node_id

    def add(self, expr, output: ArrayId, raw_output_slice) -> int:
        """Build and append a statement from a bound expression tree.

        ``expr`` is an ArrayRef-based tree (see ``ref``/``cst``); distinct
        input arrays become formal slots in first-appearance preorder.
        """
        stmt = bind_expression(self, expr, output, raw_output_slice)
        return self.add_statement(stmt)


# ---------------------------------------------------------------------------
# Bound expression helpers (used by tests, benchmarks, and program builders)


@dataclass(frozen=True)
class ArrayRef:
    """Leaf referencing a concrete array slice before slot extraction."""

    array: ArrayId
    raw_slice: object


@dataclass(frozen=True)
class BoundUnary:
    op: str
    child: object


@dataclass(frozen=True)
class BoundBinary:
    op: str
    left: object
    right: object


def ref(array: ArrayId, raw_slice) -> ArrayRef:
    return ArrayRef(array, raw_slice)


def cst(value: float) -> Const:
    return Const(float(value))


def una(op: str, child) -> BoundUnary:
    return BoundUnary(op, child)


def bin(op: str, left, right) -> BoundBinary:
    return BoundBinary(op, left, right)


def add(a, b):
    return bin("add", a, b)


def sub(a, b):
    return bin("sub", a, b)


def mul(a, b):
    return bin("mul", a, b)


def div(a, b):
    return bin("div", a, b)


def bind_expression(
    builder: DagBuilder, expr, output: ArrayId, raw_output_slice
) -> Statement:
    """Convert a bound expression into a parameterized AST plus bindings.

    Slot numbering follows first appearance of each distinct input array in
    preorder, which keeps the encoding canonical across clients.
    """
    bindings: list[ArrayId] = []

    def convert(node) -> AstExpr:
        if isinstance(node, Const):
            return node
        if isinstance(node, ArrayRef):
            if node.array not in bindings:
                bindings.append(node.array)
            slot = bindings.index(node.array)
            return SlotRef(slot, normalize_slice(node.raw_slice, builder.shapes[node.array]))
        if isinstance(node, BoundUnary):
            if node.op not in UNARY_OPS:
                raise UnsupportedOp(node.op)
            return Unary(node.op, convert(node.child))
        if isinstance(node, BoundBinary):
            if node.op not in BINARY_OPS:
                raise UnsupportedOp(node.op)
            return Binary(node.op, convert(node.left), convert(node.right))
        if isinstance(node, (int, float)):
            return Const(float(node))
        raise UnsupportedOp(f"cannot bind {node!r}")

    root = convert(expr)
    ast = StencilAst.create(root)
    out_slice = normalize_slice(raw_output_slice, builder.shapes[output])
    return builder.build_statement(ast, output, out_slice, bindings)


# ---------------------------------------------------------------------------
# Fusion pass


def fuse(dag: Dag) -> Dag:
    """Merge runs of consecutive nodes with equal output extent and no edges.

    Scans nodes in program order; a node joins the current fusion group iff
    its normalized output extent matches the group's and no edge of any kind
    connects any group member to it. Any edge implies a path, so this is the
    conservative no-path criterion restricted to consecutive nodes. Edges
    are recomputed for the fused node list.
    """
    if not dag.nodes:
        return Dag([], set(), list(dag.ast_table))

    edges_by_pair: set[tuple[int, int]] = {(a, b) for a, b, _ in dag.edges}
    groups: list[list[DagNode]] = [[dag.nodes[0]]]
    for node in dag.nodes[1:]:
        group = groups[-1]
        same_extent = node.output_extent == group[0].output_extent
        blocked = any((m.node_id, node.node_id) in edges_by_pair for m in group)
        if same_extent and not blocked:
            group.append(node)
        else:
            groups.append([node])

    fused_nodes = []
    for new_id, group in enumerate(groups):
        statements = [s for member in group for s in member.statements]
        fused_nodes.append(DagNode(new_id, statements))
    return Dag(fused_nodes, compute_edges(fused_nodes), list(dag.ast_table))


def validate_dag(dag: Dag, shapes: dict[ArrayId, Shape]) -> None:
    """Full re-validation as done on the server side (defense in depth)."""
    seen_hashes = set()
    for ast in dag.ast_table:
        recomputed = StencilAst.create(ast.root)
        if recomputed.structural_hash != ast.structural_hash or recomputed.arity != ast.arity:
            raise MalformedDag("ast table entry fails structural re-check")
        if ast.structural_hash in seen_hashes:
            raise MalformedDag("duplicate ast in table")
        seen_hashes.add(ast.structural_hash)
    for node in dag.nodes:
        if not node.statements:
            raise MalformedDag(f"node {node.node_id} has no statements")
        extent = node.output_extent
        for stmt in node.statements:
            if stmt.ast_id >= len(dag.ast_table):
                raise MalformedDag("statement references missing ast")
            ast = dag.ast_table[stmt.ast_id]
            if len(stmt.inputs) != ast.arity:
                raise MalformedDag("binding count != ast arity")
            if stmt.output in stmt.inputs:
                raise SelfDependency(
                    f"array {stmt.output} appears as both output and input"
                )
            if stmt.output not in shapes:
                raise MalformedDag(f"unknown output array {stmt.output}")
            stmt.output_slice.validate_against(shapes[stmt.output])
            if stmt.output_slice.extent != extent:
                raise MalformedDag("statement extents differ within node")
            for arr in stmt.inputs:
                if shapes.get(arr) != shapes[stmt.output]:
                    raise MalformedDag(
                        f"arrays {arr} and {stmt.output} differ in global shape"
                    )
            for slot_ref in walk_expr(ast.root):
                if isinstance(slot_ref, SlotRef):
                    arr = stmt.inputs[slot_ref.slot]
                    if arr not in shapes:
                        raise MalformedDag(f"unknown input array {arr}")
                    slot_ref.slice.validate_against(shapes[arr])
                    if slot_ref.slice.extent != extent:
                        raise MalformedDag("input extent != output extent")
    if compute_edges(dag.nodes) != dag.edges:
        raise MalformedDag("edge set does not match recomputation")


def dump_text(dag: Dag) -> str:
    """Deterministic one-line-per-node dump used by golden-file tests."""
    by_source: dict[int, list[tuple[int, str]]] = {}
    for a, b, kind in dag.edges:
        by_source.setdefault(a, []).append((b, kind))
    lines = []
    for node in dag.nodes:
        stmts = " ".join(
            f"ast{s.ast_id}->a{s.output}[{s.output_slice}]" for s in node.statements
        )
        reads = ",".join(f"a{a}" for a in sorted(node.reads))
        writes = ",".join(f"a{a}" for a in sorted(node.writes))
        edges = ",".join(
            f"knl{b}:{kind}" for b, kind in sorted(by_source.get(node.node_id, []))
        )
        lines.append(
            f"knl{node.node_id}: [{stmts}] reads={{{reads}}} "
            f"writes={{{writes}}} edges->{{{edges}}}"
        )
    return "\n".join(lines) + "\n"
