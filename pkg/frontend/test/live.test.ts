/**
 * End-to-end tests against a launcher-spawned job (requires the python
 * package installed in the environment). One job serves all subtests; the
 * golden comparison runs first so array ids start at zero.
 */
import assert from "node:assert";
import { spawn, ChildProcess } from "node:child_process";
import { once } from "node:events";
import * as fs from "node:fs";
import * as path from "node:path";
import { after, before, test } from "node:test";

import { c } from "../src/expr";
import { s } from "../src/slice";
import { SelfDependencyError, StencilSession } from "../src/session";
import { laplaceScript } from "./program";

const REPO_ROOT = path.resolve(__dirname, "..", "..", "..");
let job: ChildProcess;
let endpoint = "";

before(async () => {
  job = spawn(
    "python3",
    ["-m", "elastencil.cli", "launch", "--workers", "8", "--max-workers", "8"],
    { cwd: REPO_ROOT, stdio: ["ignore", "pipe", "inherit"] },
  );
  let buffered = "";
  while (!endpoint) {
    const [chunk] = (await Promise.race([
      once(job.stdout!, "data"),
      once(job, "exit").then(() => {
        throw new Error("launcher exited before reporting an endpoint");
      }),
    ])) as [Buffer];
    buffered += chunk.toString();
    const match = buffered.match(/endpoint (\S+)/);
    if (match) endpoint = match[1];
  }
});

after(() => {
  job?.kill("SIGTERM");
});

test("example script produces byte-identical DAG to the reference encoder", async () => {
  const session = await StencilSession.connect(endpoint, {
    flushDepth: 100000,
  });
  try {
    await laplaceScript(session, 64, 10);
    const golden = fs.readFileSync(
      path.join(REPO_ROOT, "tests", "golden", "example1.dag"),
    );
    assert.ok(session.pendingDagBytes().equals(golden), "dag bytes differ");
    await session.sync(); // execute it before the next subtest reuses the job
  } finally {
    session.close();
  }
});

test("laplace results: exact boundaries, converging symmetric interior", async () => {
  const session = await StencilSession.connect(endpoint, { flushDepth: 20 });
  try {
  const { u } = await laplaceScript(session, 32, 50);
  const data = await u.fetch();
  assert.equal(data.length, 32 * 32);
  const at = (i: number, j: number) => data[i * 32 + j];
  for (let k = 0; k < 32; k++) {
    assert.equal(at(0, k), 1.0);
    assert.equal(at(31, k), 1.0);
    assert.equal(at(k, 0), 1.0);
    assert.equal(at(k, 31), 1.0);
  }
  assert.ok(at(16, 16) > 0 && at(16, 16) < 1);
  // The domain is transpose-symmetric; values agree up to rounding (the
  // update tree associates row neighbors before column neighbors, so the
  // mirrored sums can differ in the last ulp).
  for (let i = 1; i < 31; i++) {
    for (let j = i + 1; j < 31; j++) {
      assert.ok(Math.abs(at(i, j) - at(j, i)) < 1e-12);
    }
  }
  } finally {
    session.close();
  }
});

test("self dependency raises at the offending statement", async () => {
  const session = await StencilSession.connect(endpoint, { flushDepth: 100 });
  try {
    const a = await session.createArray([16, 16]);
    assert.throws(
      () => a.set([s(), s()], a.at(s(), s()).mul(2.0)),
      SelfDependencyError,
    );
    await session.sync();
  } finally {
    session.close();
  }
});

test("flush policy batches by pending node count", async () => {
  const session = await StencilSession.connect(endpoint, { flushDepth: 10 });
  try {
    await laplaceScript(session, 32, 25); // 2 + 8 + 25 = 35 nodes
    await session.sync();
    assert.equal(session.batchesSubmitted, 4); // ceil(35 / 10)
  } finally {
    session.close();
  }
});

test("rescale script returns stage timings and keeps computing", async () => {
  const session = await StencilSession.connect(endpoint, { flushDepth: 50 });
  let { u, scratch } = await laplaceScript(session, 64, 30);

  const down = await session.rescale(4);
  for (const value of [down.lbMs, down.checkpointMs, down.restartMs, down.restoreMs]) {
    assert.ok(Number.isFinite(value) && value >= 0);
  }
  assert.ok(down.restartMs > 0);

  for (let i = 0; i < 30; i++) {
    scratch.set(
      [s(1, -1), s(1, -1)],
      c(0.25).mul(
        u.at(s(null, -2), s(1, -1))
          .add(u.at(s(2), s(1, -1)))
          .add(u.at(s(1, -1), s(null, -2)))
          .add(u.at(s(1, -1), s(2))),
      ),
    );
    [u, scratch] = [scratch, u];
  }

  const up = await session.rescale(8);
  assert.ok(up.restartMs > 0);

  const data = await u.fetch();
  assert.equal(data[0], 1.0);
  await session.shutdown();
});
