/**
 * Lazy scripting session: arrays capture slice assignments into a pending
 * statement DAG; batches ship asynchronously once the pending node count
 * reaches the flush depth, and only sync/fetch/rescale ever block on the
 * server. Swapping two array variables swaps handles only, so one
 * parameterized expression tree serves every loop iteration.
 */
import * as net from "net";

import { DagBuilder, SelfDependencyError, encodeDag, fuse } from "./dag";
import { ConstExpr, Expr, RefExpr, lift, Operand } from "./expr";
import { Slice, SliceArg, fullBounds, normalizeSlices } from "./slice";
import * as wire from "./wire";

export interface SessionOptions {
  /** Pending statements before a batch is shipped. */
  flushDepth?: number;
  /** Run the fusion pass on every flushed batch (default true). */
  fuseBatches?: boolean;
}

export class LazyArray {
  constructor(
    readonly session: StencilSession,
    readonly id: number,
    readonly shape: number[],
  ) {}

  /** Expression leaf: this array at the given slices. */
  at(...slices: SliceArg[]): Expr {
    normalizeSlices(slices, this.shape); // reject bad slices eagerly
    return new RefExpr(this.id, this.shape, slices);
  }

  /** Capture `this[slices] = expr` into the pending DAG. */
  set(slices: SliceArg[], expr: Operand): void {
    this.session.assign(this, slices, expr);
  }

  fetch(slices?: SliceArg[]): Promise<Float64Array> {
    return this.session.fetch(this, slices);
  }
}

export class StencilSession {
  private socket!: net.Socket;
  private parser = new wire.FrameParser();
  private seq = 0;
  private waiters = new Map<
    number,
    { resolve: (r: wire.Response) => void; reject: (e: Error) => void }
  >();
  private bufferedErrors: wire.ServerError[] = [];
  private socketError: Error | null = null;
  private builder: DagBuilder;
  private shapes = new Map<number, number[]>();
  readonly flushDepth: number;
  readonly fuseBatches: boolean;
  batchesSubmitted = 0;

  private constructor(options: SessionOptions) {
    this.flushDepth = Math.max(1, options.flushDepth ?? 100);
    this.fuseBatches = options.fuseBatches ?? true;
    this.builder = new DagBuilder(this.shapes);
  }

  static async connect(
    endpoint?: string,
    options: SessionOptions = {},
  ): Promise<StencilSession> {
    const address = endpoint ?? process.env.ELASTENCIL_ENDPOINT;
    if (!address) {
      throw new Error("no endpoint given and ELASTENCIL_ENDPOINT unset");
    }
    const idx = address.lastIndexOf(":");
    const host = address.slice(0, idx);
    const port = Number(address.slice(idx + 1));
    const session = new StencilSession(options);
    await new Promise<void>((resolve, reject) => {
      const socket = net.createConnection({ host, port }, () => {
        socket.setNoDelay(true);
        session.socket = socket;
        resolve();
      });
      socket.on("error", (err) => {
        if (!session.socket) reject(err);
        else session.failAll(err);
      });
      socket.on("data", (chunk) => session.onData(chunk));
      socket.on("close", () =>
        session.failAll(new Error("connection closed")),
      );
    });
    return session;
  }

  private onData(chunk: Buffer): void {
    let frames;
    try {
      frames = this.parser.feed(chunk);
    } catch (err) {
      this.failAll(err as Error);
      return;
    }
    for (const { kind, body } of frames) {
      const response = wire.decodeResponse(kind, body);
      const waiter = this.waiters.get(response.seq);
      if (waiter) {
        this.waiters.delete(response.seq);
        if (response.kind === wire.ERROR) {
          waiter.reject(
            new wire.ServerError(response.code ?? 1, response.message ?? ""),
          );
        } else {
          waiter.resolve(response);
        }
      } else if (response.kind === wire.ERROR) {
        // Asynchronous batch failure; surfaces on the next blocking call.
        this.bufferedErrors.push(
          new wire.ServerError(response.code ?? 1, response.message ?? ""),
        );
      }
    }
  }

  private failAll(err: Error): void {
    this.socketError = this.socketError ?? err;
    for (const { reject } of this.waiters.values()) reject(err);
    this.waiters.clear();
  }

  private send(buf: Buffer): void {
    if (this.socketError) throw this.socketError;
    this.socket.write(buf);
  }

  private request(seqUsed: number, buf: Buffer): Promise<wire.Response> {
    return new Promise((resolve, reject) => {
      this.waiters.set(seqUsed, { resolve, reject });
      try {
        this.send(buf);
      } catch (err) {
        this.waiters.delete(seqUsed);
        reject(err);
      }
    });
  }

  private surfaceBufferedErrors(): void {
    const err = this.bufferedErrors.shift();
    if (err) {
      this.bufferedErrors.length = 0;
      throw err;
    }
  }

  // -- program surface -----------------------------------------------------

  async createArray(shape: number[]): Promise<LazyArray> {
    if (
      shape.length < 1 || shape.length > 2 ||
      shape.some((e) => !Number.isInteger(e) || e <= 0)
    ) {
      throw new Error(`positive integer extents required, got ${shape}`);
    }
    const seq = this.seq++;
    const response = await this.request(
      seq,
      wire.encodeCreateArray(seq, shape),
    );
    const id = response.array!;
    this.shapes.set(id, [...shape]);
    // Creation node: zero-fill statement over the full array.
    const stmt = this.builder.buildStatement(
      new ConstExpr(0.0),
      id,
      fullBounds(shape).map(([lo, hi]) => new Slice(lo, hi)),
    );
    this.builder.addStatement(stmt);
    this.maybeFlush();
    return new LazyArray(this, id, [...shape]);
  }

  assign(array: LazyArray, slices: SliceArg[], expr: Operand): void {
    const stmt = this.builder.buildStatement(lift(expr), array.id, slices);
    this.builder.addStatement(stmt);
    this.maybeFlush();
  }

  /** Encode the pending (pre-fusion) DAG; used by golden tests. */
  pendingDagBytes(): Buffer {
    return encodeDag(
      this.builder.nodes,
      this.builder.edges,
      this.builder.astTable,
    );
  }

  pendingNodeCount(): number {
    return this.builder.nodeCount;
  }

  private maybeFlush(): void {
    if (this.builder.nodeCount >= this.flushDepth) this.flush();
  }

  flush(): void {
    if (this.builder.nodeCount === 0) return;
    let { nodes, edges, astTable } = this.builder;
    if (this.fuseBatches) {
      ({ nodes, edges, astTable } = fuse(nodes, edges, astTable));
    }
    const seq = this.seq++;
    this.send(wire.encodeSubmitBatch(seq, encodeDag(nodes, edges, astTable)));
    this.batchesSubmitted += 1;
    this.builder = new DagBuilder(this.shapes);
  }

  async sync(): Promise<void> {
    this.flush();
    const seq = this.seq++;
    await this.request(seq, wire.encodeSimple(wire.SYNC, seq));
    this.surfaceBufferedErrors();
  }

  async fetch(array: LazyArray, slices?: SliceArg[]): Promise<Float64Array> {
    this.flush();
    const bounds = slices
      ? normalizeSlices(slices, array.shape)
      : fullBounds(array.shape);
    const seq = this.seq++;
    const response = await this.request(
      seq,
      wire.encodeFetch(seq, array.id, bounds),
    );
    this.surfaceBufferedErrors();
    const payload = response.payload!;
    return new Float64Array(
      payload.buffer.slice(
        payload.byteOffset,
        payload.byteOffset + payload.byteLength,
      ),
    );
  }

  async rescale(count: number): Promise<wire.StageTimings> {
    if (!Number.isInteger(count) || count < 1) {
      throw new Error(`worker count ${count} must be a positive integer`);
    }
    this.flush();
    const seq = this.seq++;
    const response = await this.request(seq, wire.encodeRescale(seq, count));
    this.surfaceBufferedErrors();
    return response.timings!;
  }

  async stats(): Promise<unknown> {
    this.flush();
    const seq = this.seq++;
    const response = await this.request(
      seq,
      wire.encodeSimple(wire.GET_STATS, seq),
    );
    return response.stats;
  }

  async shutdown(): Promise<void> {
    const seq = this.seq++;
    try {
      await this.request(seq, wire.encodeSimple(wire.SHUTDOWN, seq));
    } finally {
      this.close();
    }
  }

  close(): void {
    this.socket?.destroy();
  }
}

export { SelfDependencyError };
