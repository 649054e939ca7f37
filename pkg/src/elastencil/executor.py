"""Per-worker DAG batch execution.

Nodes run when their DAG predecessors are done and the halo rounds they
depend on have completed; independent nodes keep computing while rounds for
other nodes are in flight, which is the compute/communication overlap the
two-lane contract provides. Kernel evaluation is a small stack machine over
numpy blocks, one store per statement, applied to the intersection of the
statement's output slice with each owned tile.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import (
    KernelMeta,
    KernelPlan,
    OP_BINARY,
    OP_CONST,
    OP_LOAD,
    OP_UNARY,
    StatementPlan,
    analyze_dag,
    compile_plan,
)
from .exchange import ExchangeManager
from .grid import Tile, TileStore
from .ir import ArrayId, Dag

_UFUNC_UNARY = {"neg": np.negative, "abs": np.abs, "sqrt": np.sqrt}
_UFUNC_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply,
                 "div": np.divide}

PENDING = "pending"
EXCHANGING = "exchanging"
READY = "ready"
DONE = "done"


@dataclass
class NodeState:
    node_id: int
    remaining_preds: int
    status: str = PENDING
    pending_rounds: set[tuple[ArrayId, int]] = field(default_factory=set)


@dataclass
class BatchStats:
    nodes_executed: int = 0
    kernel_launches: int = 0
    rounds: dict[ArrayId, int] = field(default_factory=dict)
    net_messages: int = 0
    wall_ms: float = 0.0
    node_ms: dict[int, float] = field(default_factory=dict)
    compute_ms: float = 0.0
    wait_ms: float = 0.0
    prepare_ms: float = 0.0


class ScratchPool:
    """Reusable temporary blocks, keyed by shape.

    Explicit ufunc calls do not get numpy's expression-temporary elision, so
    without reuse every operation would allocate (and fault in) a fresh
    block; steady-state evaluation should allocate nothing.
    """

    def __init__(self):
        self._free: dict[tuple[int, ...], list[np.ndarray]] = {}

    def take(self, shape: tuple[int, ...]) -> np.ndarray:
        bucket = self._free.get(shape)
        if bucket:
            return bucket.pop()
        return np.empty(shape, dtype=np.float64)

    def give(self, block: np.ndarray) -> None:
        self._free.setdefault(block.shape, []).append(block)


def evaluate_statement(plan: StatementPlan, store: TileStore, tile: Tile,
                       pool: ScratchPool | None = None) -> bool:
    """Evaluate one statement over its intersection with the tile interior.

    Returns False when the intersection is empty. Reads go through the padded
    buffer so ghost cells satisfy negative/positive offsets. The root
    operation writes straight into the interior view, which is safe because
    the output array is never also an input (no-self-dependency rule).
    """
    info = store.arrays[plan.output]
    origin = store.decomp.tile_origin(info.shape, tile.coords)
    ext = store.decomp.tile_extents(info.shape)
    inter = []
    for (lo, hi), o, e in zip(plan.output_slice_bounds, origin, ext):
        a, b = max(lo, o), min(hi, o + e)
        if a >= b:
            return False
        inter.append((a, b))

    if pool is None:
        pool = ScratchPool()
    out_view = store.interior_view(tile, plan.output)
    out_sel = tuple(slice(a - o, b - o) for (a, b), o in zip(inter, origin))
    dest = out_view[out_sel]
    block = tuple(b - a for a, b in inter)

    def load(slot: int, offset) -> np.ndarray:
        array = plan.inputs[slot]
        src = tile.buffers[array]
        depth = tile.depths[array]
        src_origin = store.decomp.tile_origin(
            store.arrays[array].shape, tile.coords
        )
        sel = []
        for d in range(len(block)):
            gstart = inter[d][0] + offset[d]
            local = gstart - src_origin[d] + depth[d]
            sel.append(slice(local, local + block[d]))
        return src[tuple(sel)]

    # Stack of (value, is_scratch); scratch entries are pool-owned blocks the
    # next operation may overwrite in place.
    stack: list = []
    last = len(plan.instructions) - 1
    with np.errstate(all="ignore"):
        for index, instr in enumerate(plan.instructions):
            op = instr[0]
            if op == OP_CONST:
                stack.append((np.float64(instr[1]), False))
            elif op == OP_LOAD:
                stack.append((load(instr[1], instr[2]), False))
            elif op == OP_UNARY:
                value, scratch = stack.pop()
                ufunc = _UFUNC_UNARY[instr[1]]
                if np.ndim(value) == 0:
                    stack.append((ufunc(value), False))
                else:
                    out = dest if index == last else (
                        value if scratch else pool.take(block)
                    )
                    ufunc(value, out=out)
                    if scratch and out is not value:
                        pool.give(value)
                    stack.append((out, out is not dest))
            elif op == OP_BINARY:
                right, r_scr = stack.pop()
                left, l_scr = stack.pop()
                ufunc = _UFUNC_BINARY[instr[1]]
                if np.ndim(left) == 0 and np.ndim(right) == 0:
                    stack.append((ufunc(left, right), False))
                    continue
                if index == last:
                    out = dest
                elif l_scr:
                    out = left
                elif r_scr:
                    out = right
                else:
                    out = pool.take(block)
                ufunc(left, right, out=out)
                if l_scr and out is not left:
                    pool.give(left)
                if r_scr and out is not right:
                    pool.give(right)
                stack.append((out, out is not dest))
        result, scratch = stack.pop()
        if result is not dest:
            dest[...] = result
            if scratch:
                pool.give(result)
    return True


class Executor:
    """Runs batches for one worker over its tile store and exchange manager."""

    def __init__(self, store: TileStore, exchanges: ExchangeManager):
        self.store = store
        self.exchanges = exchanges
        self.pool = ScratchPool()
        # Optional hook driving message receipt while waiting on a round
        # (the worker pumps its peer sockets here); defaults to sleeping on
        # the exchange manager's completion condition.
        self.idle_wait = None
        # Persistent per-array ghost depth, grown monotonically over batches.
        self.depths: dict[ArrayId, tuple[int, ...]] = {}

    def prepare_batch(self, dag: Dag) -> tuple[
        list[KernelMeta], list[KernelPlan], dict[int | None, list]
    ]:
        """Analysis, plan compilation, capacity checks, and the push plan.

        Any error here aborts the batch before a single node executes; the
        checks are pure in shared state so every worker fails identically.

        The push plan maps "after node N completes" (None = batch start) to
        the exchange rounds whose send side becomes ready at that point, so
        strips go on the wire as soon as the last writer finishes instead of
        when the dependent reader is scheduled; that is what overlaps
        communication with the computation of independent nodes.
        """
        shapes = {a: info.shape for a, info in self.store.arrays.items()}
        metas = analyze_dag(dag, shapes)
        plans = [compile_plan(node, dag.ast_table) for node in dag.nodes]
        needs: dict[ArrayId, tuple[int, ...]] = {}
        for meta in metas:
            for array, off in meta.array_max_offset.items():
                cur = needs.get(array)
                needs[array] = off if cur is None else tuple(
                    max(a, b) for a, b in zip(cur, off)
                )
        for array, off in sorted(needs.items()):
            old = self.depths.get(array, tuple(0 for _ in off))
            new = tuple(max(a, b) for a, b in zip(old, off))
            self.store.check_depth_fits(array, new)
            self.depths[array] = new
        for array in sorted(needs):
            grew = self.store.ensure_ghost_capacity(array, self.depths[array])
            if grew:
                # A grown frame starts zeroed, so the next dependent kernel
                # must re-exchange; advancing the local generation (uniformly
                # on every worker, since depth requirements are deterministic)
                # makes that round a brand-new key.
                self.store.bump_local_epoch(array)

        # Same walk the epoch simulator does, so the round set is identical;
        # each round is attached to its last preceding writer node.
        local: dict[ArrayId, int] = {}
        ghost: dict[ArrayId, int] = {}
        last_writer: dict[ArrayId, int] = {}
        pushes: dict[int | None, list[tuple[ArrayId, int]]] = {}
        for node, meta in zip(dag.nodes, metas):
            for array in sorted(meta.array_max_offset):
                if not meta.needs_exchange(array):
                    continue
                target = local.setdefault(array, self.store.local_epoch(array))
                current = ghost.setdefault(
                    array, self.exchanges.ghost_generation(array)
                )
                if target == 0 or current == target:
                    continue
                pushes.setdefault(last_writer.get(array), []).append(
                    (array, target)
                )
                ghost[array] = target
            for array in node.writes:
                local[array] = local.get(
                    array, self.store.local_epoch(array)
                ) + 1
                last_writer[array] = node.node_id
        return metas, plans, pushes

    def execute_batch(self, dag: Dag) -> BatchStats:
        t0 = time.perf_counter()
        rounds_before = self.exchanges.snapshot_stats()
        metas, plans, pushes = self.prepare_batch(dag)
        stats = BatchStats()
        stats.prepare_ms = (time.perf_counter() - t0) * 1e3
        for array, epoch in pushes.get(None, ()):
            self.exchanges.ensure_round(array, epoch)

        states = {
            n.node_id: NodeState(n.node_id, 0) for n in dag.nodes
        }
        # Edge kinds collapse for scheduling; only unique pairs matter.
        unique_deps: dict[int, set[int]] = {}
        for a, b in set((x, y) for x, y, _ in dag.edges):
            unique_deps.setdefault(a, set()).add(b)
            states[b].remaining_preds += 1

        ready: list[int] = []
        exchanging: set[int] = set()

        def classify(node_id: int) -> None:
            state = states[node_id]
            meta = metas[node_id]
            for array in sorted(meta.array_max_offset):
                if not meta.needs_exchange(array):
                    continue
                # The last-completed-round scalar is the authoritative ghost
                # generation here; per-tile ghost epochs are transiently
                # non-uniform while a round is in flight.
                target = self.store.local_epoch(array)
                if target == 0 or self.exchanges.ghost_generation(array) == target:
                    continue
                if not self.exchanges.ensure_round(array, target):
                    state.pending_rounds.add((array, target))
            if state.pending_rounds:
                state.status = EXCHANGING
                exchanging.add(node_id)
            else:
                state.status = READY
                heapq.heappush(ready, node_id)

        for node in dag.nodes:
            if states[node.node_id].remaining_preds == 0:
                classify(node.node_id)

        done_count = 0
        seen = self.exchanges.completion_generation()
        while done_count < len(dag.nodes):
            if not ready:
                self._poll_exchanging(states, exchanging, ready)
                if not ready:
                    t_wait = time.perf_counter()
                    if self.idle_wait is not None:
                        self.idle_wait(0.05)
                    else:
                        seen = self.exchanges.wait_completion_change(seen, 0.05)
                    stats.wait_ms += (time.perf_counter() - t_wait) * 1e3
                    continue
            node_id = heapq.heappop(ready)
            node = dag.nodes[node_id]
            t_node = time.perf_counter()
            for coords in sorted(self.store.tiles):
                tile = self.store.tiles[coords]
                for plan in plans[node_id].statements:
                    evaluate_statement(plan, self.store, tile, self.pool)
                stats.kernel_launches += 1
            stats.compute_ms += (time.perf_counter() - t_node) * 1e3
            # Epochs advance on every tile even when intersections were
            # empty, keeping the exchange predicate globally uniform.
            for array in sorted(node.writes):
                self.store.bump_local_epoch(array)
            for array, epoch in pushes.get(node_id, ()):
                self.exchanges.ensure_round(array, epoch)
            stats.nodes_executed += 1
            stats.node_ms[node_id] = (time.perf_counter() - t_node) * 1e3
            states[node_id].status = DONE
            done_count += 1
            for dep in sorted(unique_deps.get(node_id, ())):
                states[dep].remaining_preds -= 1
                if states[dep].remaining_preds == 0:
                    classify(dep)

        after = self.exchanges.snapshot_stats()
        for array, count in after["rounds"].items():
            delta = count - rounds_before["rounds"].get(array, 0)
            if delta:
                stats.rounds[array] = delta
        stats.net_messages = after["net_messages"] - rounds_before["net_messages"]
        stats.wall_ms = (time.perf_counter() - t0) * 1e3
        return stats

    def _poll_exchanging(self, states, exchanging: set[int], ready: list[int]) -> None:
        satisfied = []
        for node_id in exchanging:
            state = states[node_id]
            state.pending_rounds = {
                (a, e) for (a, e) in state.pending_rounds
                if not self.exchanges.round_complete(a, e)
            }
            if not state.pending_rounds:
                satisfied.append(node_id)
        for node_id in satisfied:
            exchanging.discard(node_id)
            states[node_id].status = READY
            heapq.heappush(ready, node_id)
