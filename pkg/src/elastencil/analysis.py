"""Per-node analysis pass: index offsets, ghost requirements, evaluation plans.

For every slot reference the offset between input and output start indices
is recorded; the per-slot maxima drive ghost-frame sizing, and the per-array
maxima decide which halo exchanges a node needs. The evaluation plan is a
flat postorder instruction list interpreted once per output element block,
the portable stand-in for generated device code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import UnsupportedOp
from .ir import (
    ArrayId,
    Binary,
    Const,
    Dag,
    DagNode,
    Shape,
    SlotRef,
    StencilAst,
    Unary,
)

Offset = tuple[int, ...]


@dataclass
class KernelMeta:
    """Access-pattern summary for one DAG node."""

    node_id: int
    output_extent: tuple[int, ...]
    # (statement index, slot) -> per-dimension max |input.start - output.start|
    slot_max_offset: dict[tuple[int, int], Offset] = field(default_factory=dict)
    # array -> per-dimension max |offset| over every slot bound to it
    array_max_offset: dict[ArrayId, Offset] = field(default_factory=dict)
    written_arrays: set[ArrayId] = field(default_factory=set)

    def needs_exchange(self, array: ArrayId) -> bool:
        off = self.array_max_offset.get(array)
        return off is not None and any(o > 0 for o in off)


def analyze(node: DagNode, ast_table: list[StencilAst],
            shapes: dict[ArrayId, Shape]) -> KernelMeta:
    """Record per-slot and per-array maximum index offsets for a node.

    Offsets come straight from normalized slice starts: for a slot reference
    the per-dimension offset is input.start - output.start. Pure function of
    the node and tables; shapes are used only to re-assert slice validity.
    """
    extent = node.output_extent
    meta = KernelMeta(node.node_id, extent)
    for si, stmt in enumerate(node.statements):
        ast = ast_table[stmt.ast_id]
        out_start = stmt.output_slice.starts
        stmt.output_slice.validate_against(shapes[stmt.output])
        meta.written_arrays.add(stmt.output)
        for expr in _walk(ast.root):
            if not isinstance(expr, SlotRef):
                continue
            array = stmt.inputs[expr.slot]
            expr.slice.validate_against(shapes[array])
            offset = tuple(
                abs(i - o) for i, o in zip(expr.slice.starts, out_start)
            )
            key = (si, expr.slot)
            meta.slot_max_offset[key] = _ewise_max(
                meta.slot_max_offset.get(key), offset
            )
            meta.array_max_offset[array] = _ewise_max(
                meta.array_max_offset.get(array), offset
            )
    return meta


def _ewise_max(a: Offset | None, b: Offset) -> Offset:
    if a is None:
        return b
    return tuple(max(x, y) for x, y in zip(a, b))


def _walk(expr):
    stack = [expr]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Unary):
            stack.append(node.child)
        elif isinstance(node, Binary):
            stack.append(node.right)
            stack.append(node.left)


def ghost_depth(array: ArrayId, all_meta: list[KernelMeta]) -> Offset | None:
    """Per-dimension ghost depth: max offset over every kernel using the array.

    Returns None when no analyzed kernel reads the array. Monotone under
    accumulation: callers max this against any previously established depth.
    """
    depth: Offset | None = None
    for meta in all_meta:
        off = meta.array_max_offset.get(array)
        if off is not None:
            depth = _ewise_max(depth, off)
    return depth


# ---------------------------------------------------------------------------
# Evaluation plans

OP_CONST = "const"
OP_LOAD = "load"
OP_UNARY = "unary"
OP_BINARY = "binary"


@dataclass(frozen=True)
class StatementPlan:
    """Postorder instruction list for one statement; implicit final store."""

    instructions: tuple[tuple, ...]
    output: ArrayId
    output_slice_bounds: tuple[tuple[int, int], ...]
    inputs: tuple[ArrayId, ...]


@dataclass(frozen=True)
class KernelPlan:
    node_id: int
    statements: tuple[StatementPlan, ...]


def compile_plan(node: DagNode, ast_table: list[StencilAst]) -> KernelPlan:
    """Deterministic left-to-right postorder plan, one sub-plan per statement.

    Evaluating a plan at output element p reads slot s only at p + offset for
    the offsets recorded by analyze(); fused statements keep program order so
    interpretation is equivalent to unfused execution.
    """
    stmt_plans = []
    for stmt in node.statements:
        ast = ast_table[stmt.ast_id]
        out_start = stmt.output_slice.starts
        instrs: list[tuple] = []

        def emit(expr) -> None:
            if isinstance(expr, Const):
                instrs.append((OP_CONST, expr.value))
            elif isinstance(expr, SlotRef):
                offset = tuple(
                    i - o for i, o in zip(expr.slice.starts, out_start)
                )
                instrs.append((OP_LOAD, expr.slot, offset))
            elif isinstance(expr, Unary):
                emit(expr.child)
                instrs.append((OP_UNARY, expr.op))
            elif isinstance(expr, Binary):
                emit(expr.left)
                emit(expr.right)
                instrs.append((OP_BINARY, expr.op))
            else:
                raise UnsupportedOp(f"cannot compile {expr!r}")

        emit(ast.root)
        stmt_plans.append(
            StatementPlan(
                tuple(instrs), stmt.output, stmt.output_slice.bounds, stmt.inputs
            )
        )
    return KernelPlan(node.node_id, tuple(stmt_plans))


def analyze_dag(dag: Dag, shapes: dict[ArrayId, Shape]) -> list[KernelMeta]:
    return [analyze(node, dag.ast_table, shapes) for node in dag.nodes]


def dump_meta(meta: KernelMeta) -> str:
    """Text dump of per-slot offsets, used by golden tests."""
    lines = []
    multi = len({si for si, _ in meta.slot_max_offset} | {0}) > 1
    for (si, slot), off in sorted(meta.slot_max_offset.items()):
        prefix = f"stmt{si} " if multi else ""
        tag = " ghost-candidate" if any(o > 0 for o in off) else ""
        fmt = ",".join(str(o) for o in off)
        lines.append(f"{prefix}slot{slot}: maxoff=({fmt}){tag}")
    return "\n".join(lines) + ("\n" if lines else "")
