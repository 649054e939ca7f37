"""Reference implementations used as ground truth in tests and benchmarks.

Deliberately independent of the tile/exchange/executor machinery: statements
are executed sequentially on whole arrays with plain slice arithmetic, so any
disagreement with a distributed run points at the data-movement layers. Two
evaluator routes are provided (recursive whole-array and per-element scalar)
to cross-check each other on small grids.
"""

from __future__ import annotations

import numpy as np

from .analysis import KernelMeta
from .ir import (
    ArrayId,
    Binary,
    Const,
    Dag,
    Shape,
    SliceSpec,
    SlotRef,
    Statement,
    StencilAst,
    Unary,
)

_UNARY = {
    "neg": np.negative,
    "abs": np.abs,
    "sqrt": np.sqrt,
}

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def _np_slices(spec: SliceSpec) -> tuple[slice, ...]:
    return tuple(slice(a, b) for a, b in spec.bounds)


def eval_recursive(expr, stmt: Statement, arrays: dict[ArrayId, np.ndarray]):
    """Evaluate an expression tree over whole-array slices.

    Constants are np.float64 scalars so float faults (div by zero, sqrt of
    negatives) follow IEEE semantics instead of raising.
    """
    if isinstance(expr, Const):
        return np.float64(expr.value)
    if isinstance(expr, SlotRef):
        return arrays[stmt.inputs[expr.slot]][_np_slices(expr.slice)]
    if isinstance(expr, Unary):
        return _UNARY[expr.op](eval_recursive(expr.child, stmt, arrays))
    if isinstance(expr, Binary):
        left = eval_recursive(expr.left, stmt, arrays)
        right = eval_recursive(expr.right, stmt, arrays)
        return _BINARY[expr.op](left, right)
    raise TypeError(f"unknown expression {expr!r}")


def reference_execute(
    statements: list[Statement],
    ast_table: list[StencilAst],
    shapes: dict[ArrayId, Shape],
    arrays: dict[ArrayId, np.ndarray] | None = None,
) -> dict[ArrayId, np.ndarray]:
    """Execute statements in program order on zero-initialized whole arrays.

    The output is the bitwise ground truth for every distributed run: the
    operations are elementwise IEEE float64, so values are independent of
    tiling and evaluation schedule.
    """
    if arrays is None:
        arrays = {}
    for aid, shape in shapes.items():
        arrays.setdefault(aid, np.zeros(shape, dtype=np.float64))
    with np.errstate(all="ignore"):
        for stmt in statements:
            ast = ast_table[stmt.ast_id]
            value = eval_recursive(ast.root, stmt, arrays)
            arrays[stmt.output][_np_slices(stmt.output_slice)] = value
    return arrays


def reference_execute_dag(
    dag: Dag,
    shapes: dict[ArrayId, Shape],
    arrays: dict[ArrayId, np.ndarray] | None = None,
) -> dict[ArrayId, np.ndarray]:
    statements = [s for node in dag.nodes for s in node.statements]
    return reference_execute(statements, dag.ast_table, shapes, arrays)


def reference_execute_scalar(
    statements: list[Statement],
    ast_table: list[StencilAst],
    shapes: dict[ArrayId, Shape],
) -> dict[ArrayId, np.ndarray]:
    """Per-element scalar route: one recursive evaluation per output element.

    Orders of magnitude slower than the whole-array route; only used to
    cross-check it on small grids.
    """
    arrays = {aid: np.zeros(shape, dtype=np.float64) for aid, shape in shapes.items()}

    def eval_at(expr, stmt, point):
        if isinstance(expr, Const):
            return np.float64(expr.value)
        if isinstance(expr, SlotRef):
            src = arrays[stmt.inputs[expr.slot]]
            idx = tuple(s + p for (s, _), p in zip(expr.slice.bounds, point))
            return src[idx]
        if isinstance(expr, Unary):
            return _UNARY[expr.op](eval_at(expr.child, stmt, point))
        if isinstance(expr, Binary):
            return _BINARY[expr.op](
                eval_at(expr.left, stmt, point), eval_at(expr.right, stmt, point)
            )
        raise TypeError(f"unknown expression {expr!r}")

    with np.errstate(all="ignore"):
        for stmt in statements:
            ast = ast_table[stmt.ast_id]
            extent = stmt.output_slice.extent
            out = arrays[stmt.output]
            out_start = stmt.output_slice.starts
            for point in np.ndindex(*extent):
                idx = tuple(s + p for s, p in zip(out_start, point))
                out[idx] = eval_at(ast.root, stmt, point)
    return arrays


# ---------------------------------------------------------------------------
# Epoch / exchange-round simulation


class EpochSimulator:
    """Scalar simulation of the generation-epoch exchange rule.

    Tracks per-array (local, ghost) counters and ghost depths across a batch
    sequence exactly like every worker does, so the per-array round counts it
    predicts must match a distributed run message-for-message.
    """

    def __init__(self):
        self.local: dict[ArrayId, int] = {}
        self.ghost: dict[ArrayId, int] = {}
        self.depth: dict[ArrayId, tuple[int, ...]] = {}
        self.rounds: dict[ArrayId, int] = {}

    def simulate_batch(self, dag: Dag, metas: list[KernelMeta]) -> None:
        # A deeper kernel grows the ghost frame; the new frame starts zeroed,
        # so growth advances the local generation exactly like the runtime
        # does, forcing one re-exchange under a brand-new round key.
        needs: dict[ArrayId, tuple[int, ...]] = {}
        for meta in metas:
            for array, off in meta.array_max_offset.items():
                cur = needs.get(array)
                needs[array] = off if cur is None else tuple(
                    max(a, b) for a, b in zip(cur, off)
                )
        for array, off in sorted(needs.items()):
            old = self.depth.get(array, tuple(0 for _ in off))
            new = tuple(max(a, b) for a, b in zip(old, off))
            if new != old:
                self.local[array] = self.local.get(array, 0) + 1
            self.depth[array] = new

        for meta in metas:
            for array in sorted(meta.array_max_offset):
                if not meta.needs_exchange(array):
                    continue
                local = self.local.get(array, 0)
                if local != 0 and self.ghost.get(array, 0) != local:
                    self.rounds[array] = self.rounds.get(array, 0) + 1
                    self.ghost[array] = local
            for array in meta.written_arrays:
                self.local[array] = self.local.get(array, 0) + 1


def epoch_simulate(dag: Dag, metas: list[KernelMeta]) -> dict[ArrayId, int]:
    """Expected exchange-round counts per array for a single batch."""
    sim = EpochSimulator()
    sim.simulate_batch(dag, metas)
    return sim.rounds


# ---------------------------------------------------------------------------
# Benchmark reference solvers


def laplace_reference(n: int, iters: int) -> np.ndarray:
    """Sequential Jacobi relaxation with unit boundaries on an n x n grid."""
    u1 = np.zeros((n, n), dtype=np.float64)
    u2 = np.zeros((n, n), dtype=np.float64)
    for u in (u1, u2):
        u[0, :] = 1.0
        u[-1, :] = 1.0
        u[:, 0] = 1.0
        u[:, -1] = 1.0
    for _ in range(iters):
        u2[1:-1, 1:-1] = 0.25 * (
            u1[:-2, 1:-1] + u1[2:, 1:-1] + u1[1:-1, :-2] + u1[1:-1, 2:]
        )
        u1, u2 = u2, u1
    return u1


def cavity_constants(n: int) -> dict[str, float]:
    """Shared coefficients for the lid-driven cavity scheme.

    Centralized so the program builder and this reference fold the exact same
    float64 constants.
    """
    rho = 1.0
    nu = 0.1
    dt = 0.001
    dx = 2.0 / (n - 1)
    dy = 2.0 / (n - 1)
    return {
        "rho": rho,
        "nu": nu,
        "dt": dt,
        "dx": dx,
        "dy": dy,
        "dtdx": dt / dx,
        "dtdy": dt / dy,
        "inv2dx": 1.0 / (2.0 * dx),
        "inv2dy": 1.0 / (2.0 * dy),
        "dx2": dx * dx,
        "dy2": dy * dy,
        "pois_den": 1.0 / (2.0 * (dx * dx + dy * dy)),
        "pois_b_coeff": (dx * dx) * (dy * dy) * (1.0 / (2.0 * (dx * dx + dy * dy))),
        "pgrad_x": dt / (2.0 * rho * dx),
        "pgrad_y": dt / (2.0 * rho * dy),
        "visc_x": nu * dt / (dx * dx),
        "visc_y": nu * dt / (dy * dy),
        "inv_dt": 1.0 / dt,
    }


def cavity_reference(n: int, iters: int, pressure_iters: int = 10):
    """Sequential lid-driven cavity flow (Chorin-style projection on a grid).

    Double-buffered Jacobi form: every update reads only previous-generation
    arrays, mirroring the runtime's no-self-dependency rule. Returns (u, v, p).
    """
    c = cavity_constants(n)
    u = np.zeros((n, n), dtype=np.float64)
    v = np.zeros((n, n), dtype=np.float64)
    p = np.zeros((n, n), dtype=np.float64)
    un = np.zeros((n, n), dtype=np.float64)
    vn = np.zeros((n, n), dtype=np.float64)
    pn = np.zeros((n, n), dtype=np.float64)
    b = np.zeros((n, n), dtype=np.float64)
    u[-1, :] = 1.0
    un[-1, :] = 1.0

    I = slice(1, -1)
    for _ in range(iters):
        un, u = u, un
        vn, v = v, vn

        dudx = (un[I, 2:] - un[I, :-2]) * c["inv2dx"]
        dvdy = (vn[2:, I] - vn[:-2, I]) * c["inv2dy"]
        dudy = (un[2:, I] - un[:-2, I]) * c["inv2dy"]
        dvdx = (vn[I, 2:] - vn[I, :-2]) * c["inv2dx"]
        b[I, I] = c["rho"] * (
            c["inv_dt"] * (dudx + dvdy)
            - dudx * dudx
            - 2.0 * (dudy * dvdx)
            - dvdy * dvdy
        )

        for _ in range(pressure_iters):
            pn, p = p, pn
            p[I, I] = (
                (pn[I, 2:] + pn[I, :-2]) * c["dy2"]
                + (pn[2:, I] + pn[:-2, I]) * c["dx2"]
            ) * c["pois_den"] - c["pois_b_coeff"] * b[I, I]
            p[:, -1:] = pn[:, -2:-1]
            p[0:1, :] = pn[1:2, :]
            p[:, 0:1] = pn[:, 1:2]
            p[-1:, :] = 0.0

        u[I, I] = (
            un[I, I]
            - un[I, I] * c["dtdx"] * (un[I, I] - un[I, :-2])
            - vn[I, I] * c["dtdy"] * (un[I, I] - un[:-2, I])
            - c["pgrad_x"] * (p[I, 2:] - p[I, :-2])
            + c["visc_x"] * (un[I, 2:] - 2.0 * un[I, I] + un[I, :-2])
            + c["visc_y"] * (un[2:, I] - 2.0 * un[I, I] + un[:-2, I])
        )
        v[I, I] = (
            vn[I, I]
            - un[I, I] * c["dtdx"] * (vn[I, I] - vn[I, :-2])
            - vn[I, I] * c["dtdy"] * (vn[I, I] - vn[:-2, I])
            - c["pgrad_y"] * (p[2:, I] - p[:-2, I])
            + c["visc_x"] * (vn[I, 2:] - 2.0 * vn[I, I] + vn[I, :-2])
            + c["visc_y"] * (vn[2:, I] - 2.0 * vn[I, I] + vn[:-2, I])
        )
        u[0, :] = 0.0
        u[:, 0] = 0.0
        u[:, -1] = 0.0
        u[-1, :] = 1.0
        v[0, :] = 0.0
        v[-1, :] = 0.0
        v[:, 0] = 0.0
        v[:, -1] = 0.0
    return u, v, p
