"""Shared test helpers: random program generation and small conveniences."""

from __future__ import annotations

import random

from elastencil.ir import (
    ArrayRef,
    BoundBinary,
    BoundUnary,
    cst,
    ref,
)
from elastencil.programs import DagProgram

_BIN = ["add", "sub", "mul", "div"]
_UN = ["neg", "abs", "sqrt"]


def random_program(
    rng: random.Random,
    max_size: int = 16,
    n_arrays: int = 4,
    n_statements: int = 8,
    max_offset: int = 2,
) -> DagProgram:
    """A dependency-valid random program on a small square grid.

    Starts with constant writes to random sub-slices (so arrays carry
    spatially varying data), then layers stencil statements with random
    offsets. Every statement obeys the no-self-dependency rule.
    """
    n = rng.choice([s for s in range(8, max_size + 1) if s % 4 == 0])
    prog = DagProgram()
    arrays = [prog.create_array((n, n)) for _ in range(n_arrays)]

    for array in arrays:
        for _ in range(rng.randint(1, 3)):
            prog.assign(array, _random_subslice(rng, n), cst(_tame(rng)))

    for _ in range(n_statements):
        out = rng.choice(arrays)
        inputs = [a for a in arrays if a != out]
        rng.shuffle(inputs)
        inputs = inputs[: rng.randint(1, min(2, len(inputs)))]
        margin = max_offset
        lo = rng.randint(margin, margin + 1)
        hi = n - rng.randint(margin, margin + 1)
        out_slice = ((lo, hi), (lo, hi))
        expr = _random_expr(rng, inputs, (lo, hi), n, max_offset, depth=0)
        prog.assign(out, out_slice, expr)
    return prog


def _tame(rng: random.Random) -> float:
    return round(rng.uniform(-4.0, 4.0), 3)


def _random_subslice(rng: random.Random, n: int):
    lo_r = rng.randint(0, n - 2)
    hi_r = rng.randint(lo_r + 1, n)
    lo_c = rng.randint(0, n - 2)
    hi_c = rng.randint(lo_c + 1, n)
    return ((lo_r, hi_r), (lo_c, hi_c))


def _random_expr(rng, inputs, out_bounds, n, max_offset, depth):
    lo, hi = out_bounds
    if depth >= 3 or (depth > 0 and rng.random() < 0.35):
        if rng.random() < 0.25:
            return cst(_tame(rng))
        array = rng.choice(inputs)
        dr = rng.randint(-max_offset, max_offset)
        dc = rng.randint(-max_offset, max_offset)
        return ref(array, ((lo + dr, hi + dr), (lo + dc, hi + dc)))
    if rng.random() < 0.25:
        op = rng.choice(_UN)
        child = _random_expr(rng, inputs, out_bounds, n, max_offset, depth + 1)
        if op == "sqrt":
            child = BoundUnary("abs", child)
        return BoundUnary(op, child)
    op = rng.choice(_BIN)
    left = _random_expr(rng, inputs, out_bounds, n, max_offset, depth + 1)
    right = _random_expr(rng, inputs, out_bounds, n, max_offset, depth + 1)
    if op == "div":
        right = BoundBinary("add", BoundUnary("abs", right), cst(1.5))
    return BoundBinary(op, left, right)
