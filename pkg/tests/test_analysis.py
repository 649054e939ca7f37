"""Offset analysis, ghost depth inference, and plan compilation."""

from elastencil.analysis import (
    OP_BINARY,
    OP_CONST,
    OP_LOAD,
    OP_UNARY,
    analyze,
    analyze_dag,
    compile_plan,
    dump_meta,
    ghost_depth,
)
from elastencil.ir import DagBuilder, cst, ref

from test_ir import jacobi_expr


def _single_node(builder):
    return builder.dag.nodes[0], builder.dag.ast_table


def test_jacobi_offsets():
    b = DagBuilder({0: (16, 16), 1: (16, 16)})
    b.add(jacobi_expr(0), 1, (slice(1, -1), slice(1, -1)))
    node, table = _single_node(b)
    meta = analyze(node, table, b.shapes)
    assert meta.slot_max_offset[(0, 0)] == (1, 1)
    assert meta.array_max_offset[0] == (1, 1)
    assert meta.written_arrays == {1}
    assert meta.needs_exchange(0)


def test_aligned_copy_no_ghost():
    b = DagBuilder({0: (8, 8), 1: (8, 8)})
    b.add(ref(0, (slice(None), slice(None))), 1, (slice(None), slice(None)))
    node, table = _single_node(b)
    meta = analyze(node, table, b.shapes)
    assert meta.array_max_offset[0] == (0, 0)
    assert not meta.needs_exchange(0)


def test_shifted_copy_offset_two():
    b = DagBuilder({0: (8, 8), 1: (8, 8)})
    b.add(ref(0, (slice(None, -2), slice(None))), 1, (slice(2, None), slice(None)))
    node, table = _single_node(b)
    meta = analyze(node, table, b.shapes)
    assert meta.array_max_offset[0] == (2, 0)


def test_ghost_depth_maximum_over_kernels():
    b = DagBuilder({0: (16, 16), 1: (16, 16), 2: (16, 16)})
    b.add(jacobi_expr(0), 1, (slice(1, -1), slice(1, -1)))
    b.add(
        ref(0, (slice(None, -2), slice(None))), 2, (slice(2, None), slice(None))
    )
    metas = analyze_dag(b.dag, b.shapes)
    assert ghost_depth(0, metas) == (2, 1)
    assert ghost_depth(1, metas) is None
    # Monotone: a prefix of the metas never needs more.
    assert ghost_depth(0, metas[:1]) == (1, 1)


def test_const_plan():
    b = DagBuilder({0: (8, 8)})
    b.add(cst(1.0), 0, (0, slice(None)))
    node, table = _single_node(b)
    plan = compile_plan(node, table)
    assert [i[0] for i in plan.statements[0].instructions] == [OP_CONST]


def test_jacobi_plan_shape():
    b = DagBuilder({0: (16, 16), 1: (16, 16)})
    b.add(jacobi_expr(0), 1, (slice(1, -1), slice(1, -1)))
    node, table = _single_node(b)
    plan = compile_plan(node, table)
    ops = [i[0] for i in plan.statements[0].instructions]
    assert ops.count(OP_LOAD) == 4
    assert ops.count(OP_BINARY) == 4  # 3 adds + 1 mul
    assert ops.count(OP_CONST) == 1
    loads = [i for i in plan.statements[0].instructions if i[0] == OP_LOAD]
    assert sorted(i[2] for i in loads) == [(-1, 0), (0, -1), (0, 1), (1, 0)]


def test_fused_plan_keeps_statement_order():
    b = DagBuilder({0: (8, 8), 1: (8, 8), 2: (8, 8)})
    sel = (slice(None), slice(None))
    b.add(cst(1.0), 1, sel)
    b.add(cst(2.0), 2, sel)
    from elastencil.ir import fuse

    fused = fuse(b.dag)
    plan = compile_plan(fused.nodes[0], fused.ast_table)
    assert [p.output for p in plan.statements] == [1, 2]


def test_dump_meta_format():
    b = DagBuilder({0: (16, 16), 1: (16, 16)})
    b.add(jacobi_expr(0), 1, (slice(1, -1), slice(1, -1)))
    node, table = _single_node(b)
    meta = analyze(node, table, b.shapes)
    assert dump_meta(meta) == "slot0: maxoff=(1,1) ghost-candidate\n"
