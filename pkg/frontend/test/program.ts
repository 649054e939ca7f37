/** The bundled Jacobi relaxation script, shared by tests. */
import { LazyArray, StencilSession } from "../src/session";
import { c } from "../src/expr";
import { s } from "../src/slice";

export async function laplaceScript(
  session: StencilSession,
  n: number,
  iters: number,
): Promise<{ u: LazyArray; scratch: LazyArray }> {
  let u1 = await session.createArray([n, n]);
  let u2 = await session.createArray([n, n]);
  for (const u of [u1, u2]) {
    u.set([0, s()], c(1.0));
    u.set([-1, s()], c(1.0));
    u.set([s(), 0], c(1.0));
    u.set([s(), -1], c(1.0));
  }
  for (let i = 0; i < iters; i++) {
    u2.set(
      [s(1, -1), s(1, -1)],
      c(0.25).mul(
        u1.at(s(null, -2), s(1, -1))
          .add(u1.at(s(2), s(1, -1)))
          .add(u1.at(s(1, -1), s(null, -2)))
          .add(u1.at(s(1, -1), s(2))),
      ),
    );
    [u1, u2] = [u2, u1];
  }
  return { u: u1, scratch: u2 };
}
