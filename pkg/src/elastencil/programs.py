"""Bundled benchmark programs, written against a small sink interface.

A sink is anything with ``create_array(shape) -> id`` and
``assign(array, raw_slice, expr)``; the local collector below targets a
DagBuilder for oracles and golden tests, while the protocol client exposes
the same surface for driving a live server. Builders mirror the reference
solvers in oracle.py expression-for-expression so results compare bitwise.
"""

from __future__ import annotations

from .ir import ArrayId, Const, DagBuilder, add, cst, full_slice, mul, ref, sub
from .oracle import cavity_constants


class DagProgram:
    """Local sink: collects a whole program into one Dag."""

    def __init__(self):
        self.builder = DagBuilder()
        self._next_id = 0

    def create_array(self, shape) -> ArrayId:
        array = self._next_id
        self._next_id += 1
        self.builder.declare_array(array, tuple(shape))
        stmt = self.builder.build_statement(
            _zero_ast(), array, full_slice(tuple(shape)), []
        )
        self.builder.add_statement(stmt)
        return array

    def assign(self, array: ArrayId, raw_slice, expr) -> None:
        self.builder.add(expr, array, raw_slice)

    @property
    def dag(self):
        return self.builder.dag

    @property
    def shapes(self):
        return self.builder.shapes


_ZERO_AST = None


def _zero_ast():
    global _ZERO_AST
    if _ZERO_AST is None:
        from .ir import StencilAst

        _ZERO_AST = StencilAst.create(Const(0.0))
    return _ZERO_AST


def laplace_program(sink, n: int, iters: int) -> dict[str, ArrayId]:
    """Jacobi relaxation with unit boundaries; returns final bindings."""
    u1 = sink.create_array((n, n))
    u2 = sink.create_array((n, n))
    for u in (u1, u2):
        sink.assign(u, (0, slice(None)), cst(1.0))
        sink.assign(u, (-1, slice(None)), cst(1.0))
        sink.assign(u, (slice(None), 0), cst(1.0))
        sink.assign(u, (slice(None), -1), cst(1.0))
    interior = (slice(1, -1), slice(1, -1))
    for _ in range(iters):
        sink.assign(
            u2,
            interior,
            mul(
                cst(0.25),
                add(
                    add(
                        add(
                            ref(u1, (slice(None, -2), slice(1, -1))),
                            ref(u1, (slice(2, None), slice(1, -1))),
                        ),
                        ref(u1, (slice(1, -1), slice(None, -2))),
                    ),
                    ref(u1, (slice(1, -1), slice(2, None))),
                ),
            ),
        )
        u1, u2 = u2, u1
    return {"u": u1, "scratch": u2}


def laplace_iteration_statements(sink, u1: ArrayId, u2: ArrayId, iters: int):
    """Just the relaxation loop, for pipelining experiments."""
    interior = (slice(1, -1), slice(1, -1))
    for _ in range(iters):
        sink.assign(
            u2,
            interior,
            mul(
                cst(0.25),
                add(
                    add(
                        add(
                            ref(u1, (slice(None, -2), slice(1, -1))),
                            ref(u1, (slice(2, None), slice(1, -1))),
                        ),
                        ref(u1, (slice(1, -1), slice(None, -2))),
                    ),
                    ref(u1, (slice(1, -1), slice(2, None))),
                ),
            ),
        )
        u1, u2 = u2, u1
    return {"u": u1, "scratch": u2}


def cavity_program(
    sink, n: int, iters: int, pressure_iters: int = 10
) -> dict[str, ArrayId]:
    """Lid-driven cavity flow mirroring oracle.cavity_reference exactly."""
    c = cavity_constants(n)
    u = sink.create_array((n, n))
    v = sink.create_array((n, n))
    p = sink.create_array((n, n))
    un = sink.create_array((n, n))
    vn = sink.create_array((n, n))
    pn = sink.create_array((n, n))
    b = sink.create_array((n, n))
    sink.assign(u, (-1, slice(None)), cst(1.0))
    sink.assign(un, (-1, slice(None)), cst(1.0))

    I = slice(1, -1)
    II = (I, I)

    def d_dx(a):
        # (a[I, 2:] - a[I, :-2]) * inv2dx
        return mul(
            sub(ref(a, (I, slice(2, None))), ref(a, (I, slice(None, -2)))),
            cst(c["inv2dx"]),
        )

    def d_dy(a):
        return mul(
            sub(ref(a, (slice(2, None), I)), ref(a, (slice(None, -2), I))),
            cst(c["inv2dy"]),
        )

    for _ in range(iters):
        un, u = u, un
        vn, v = v, vn

        dudx = d_dx(un)
        dvdy = d_dy(vn)
        dudy = d_dy(un)
        dvdx = d_dx(vn)
        sink.assign(
            b,
            II,
            mul(
                cst(c["rho"]),
                sub(
                    sub(
                        sub(
                            mul(cst(c["inv_dt"]), add(dudx, dvdy)),
                            mul(dudx, dudx),
                        ),
                        mul(cst(2.0), mul(dudy, dvdx)),
                    ),
                    mul(dvdy, dvdy),
                ),
            ),
        )

        for _ in range(pressure_iters):
            pn, p = p, pn
            sink.assign(
                p,
                II,
                sub(
                    mul(
                        add(
                            mul(
                                add(
                                    ref(pn, (I, slice(2, None))),
                                    ref(pn, (I, slice(None, -2))),
                                ),
                                cst(c["dy2"]),
                            ),
                            mul(
                                add(
                                    ref(pn, (slice(2, None), I)),
                                    ref(pn, (slice(None, -2), I)),
                                ),
                                cst(c["dx2"]),
                            ),
                        ),
                        cst(c["pois_den"]),
                    ),
                    mul(cst(c["pois_b_coeff"]), ref(b, II)),
                ),
            )
            sink.assign(p, (slice(None), slice(-1, None)), ref(pn, (slice(None), slice(-2, -1))))
            sink.assign(p, (slice(0, 1), slice(None)), ref(pn, (slice(1, 2), slice(None))))
            sink.assign(p, (slice(None), slice(0, 1)), ref(pn, (slice(None), slice(1, 2))))
            sink.assign(p, (slice(-1, None), slice(None)), cst(0.0))

        def advect_update(an, grad):
            # an is the advected field (un or vn); grad is the pressure
            # gradient along the matching axis.
            return add(
                add(
                    sub(
                        sub(
                            sub(
                                ref(an, II),
                                mul(
                                    mul(ref(un, II), cst(c["dtdx"])),
                                    sub(ref(an, II), ref(an, (I, slice(None, -2)))),
                                ),
                            ),
                            mul(
                                mul(ref(vn, II), cst(c["dtdy"])),
                                sub(ref(an, II), ref(an, (slice(None, -2), I))),
                            ),
                        ),
                        grad,
                    ),
                    mul(
                        cst(c["visc_x"]),
                        add(
                            sub(
                                ref(an, (I, slice(2, None))),
                                mul(cst(2.0), ref(an, II)),
                            ),
                            ref(an, (I, slice(None, -2))),
                        ),
                    ),
                ),
                mul(
                    cst(c["visc_y"]),
                    add(
                        sub(
                            ref(an, (slice(2, None), I)),
                            mul(cst(2.0), ref(an, II)),
                        ),
                        ref(an, (slice(None, -2), I)),
                    ),
                ),
            )

        grad_x = mul(
            cst(c["pgrad_x"]),
            sub(ref(p, (I, slice(2, None))), ref(p, (I, slice(None, -2)))),
        )
        sink.assign(u, II, advect_update(un, grad_x))
        grad_y = mul(
            cst(c["pgrad_y"]),
            sub(ref(p, (slice(2, None), I)), ref(p, (slice(None, -2), I))),
        )
        sink.assign(v, II, advect_update(vn, grad_y))

        sink.assign(u, (0, slice(None)), cst(0.0))
        sink.assign(u, (slice(None), 0), cst(0.0))
        sink.assign(u, (slice(None), -1), cst(0.0))
        sink.assign(u, (-1, slice(None)), cst(1.0))
        sink.assign(v, (0, slice(None)), cst(0.0))
        sink.assign(v, (-1, slice(None)), cst(0.0))
        sink.assign(v, (slice(None), 0), cst(0.0))
        sink.assign(v, (slice(None), -1), cst(0.0))
    return {"u": u, "v": v, "p": p, "b": b}
