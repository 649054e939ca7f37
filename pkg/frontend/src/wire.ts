/**
 * Frame layer and command/response codecs; see PROTOCOL.md in the repo root
 * for the byte-exact grammar. Everything is little-endian.
 */
import { Bounds } from "./slice";

export const VERSION = 1;

export const CREATE_ARRAY = 1;
export const SUBMIT_BATCH = 2;
export const FETCH = 3;
export const SYNC = 4;
export const RESCALE = 5;
export const SHUTDOWN = 6;
export const GET_STATS = 7;

export const ACK = 100;
export const FETCH_RESULT = 101;
export const RESCALE_RESULT = 102;
export const STATS_RESULT = 103;
export const ERROR = 104;
export const CREATE_RESULT = 105;

export class ProtocolError extends Error {}

export class ServerError extends Error {
  constructor(public code: number, message: string) {
    super(`server error ${code}: ${message}`);
  }
}

export function frame(kind: number, body: Buffer): Buffer {
  const header = Buffer.alloc(8);
  header.writeUInt32LE(4 + body.length, 0);
  header.writeUInt16LE(VERSION, 4);
  header.writeUInt16LE(kind, 6);
  return Buffer.concat([header, body]);
}

function writeU64(buf: Buffer, offset: number, value: number): number {
  buf.writeUInt32LE(value >>> 0, offset);
  buf.writeUInt32LE(Math.floor(value / 2 ** 32), offset + 4);
  return offset + 8;
}

function readU64(buf: Buffer, offset: number): number {
  const value = buf.readBigUInt64LE(offset);
  if (value > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new ProtocolError("u64 exceeds safe integer range");
  }
  return Number(value);
}

export function encodeCreateArray(seq: number, shape: number[]): Buffer {
  const body = Buffer.alloc(8 + 1 + shape.length * 8);
  writeU64(body, 0, seq);
  body.writeUInt8(shape.length, 8);
  let pos = 9;
  for (const extent of shape) pos = writeU64(body, pos, extent);
  return frame(CREATE_ARRAY, body);
}

export function encodeSubmitBatch(seq: number, dag: Buffer): Buffer {
  const head = Buffer.alloc(8);
  writeU64(head, 0, seq);
  return frame(SUBMIT_BATCH, Buffer.concat([head, dag]));
}

export function encodeFetch(seq: number, array: number, bounds: Bounds): Buffer {
  const body = Buffer.alloc(8 + 4 + 1 + bounds.length * 16);
  writeU64(body, 0, seq);
  body.writeUInt32LE(array, 8);
  body.writeUInt8(bounds.length, 12);
  let pos = 13;
  for (const [lo, hi] of bounds) {
    pos = writeU64(body, pos, lo);
    pos = writeU64(body, pos, hi);
  }
  return frame(FETCH, body);
}

export function encodeSimple(kind: number, seq: number): Buffer {
  const body = Buffer.alloc(8);
  writeU64(body, 0, seq);
  return frame(kind, body);
}

export function encodeRescale(seq: number, count: number): Buffer {
  const body = Buffer.alloc(12);
  writeU64(body, 0, seq);
  body.writeUInt32LE(count, 8);
  return frame(RESCALE, body);
}

export interface StageTimings {
  lbMs: number;
  checkpointMs: number;
  restartMs: number;
  restoreMs: number;
}

export interface Response {
  seq: number;
  kind: number;
  array?: number;
  shape?: number[];
  payload?: Buffer;
  code?: number;
  message?: string;
  timings?: StageTimings;
  stats?: unknown;
}

export function decodeResponse(kind: number, body: Buffer): Response {
  const seq = readU64(body, 0);
  switch (kind) {
    case ACK:
      return { seq, kind };
    case CREATE_RESULT:
      return { seq, kind, array: body.readUInt32LE(8) };
    case ERROR: {
      const code = body.readUInt16LE(8);
      const length = body.readUInt16LE(10);
      return { seq, kind, code, message: body.toString("utf8", 12, 12 + length) };
    }
    case FETCH_RESULT: {
      const rank = body.readUInt8(8);
      const shape: number[] = [];
      let pos = 9;
      for (let d = 0; d < rank; d++) {
        shape.push(readU64(body, pos));
        pos += 8;
      }
      return { seq, kind, shape, payload: body.subarray(pos) };
    }
    case RESCALE_RESULT:
      return {
        seq,
        kind,
        timings: {
          lbMs: body.readDoubleLE(8),
          checkpointMs: body.readDoubleLE(16),
          restartMs: body.readDoubleLE(24),
          restoreMs: body.readDoubleLE(32),
        },
      };
    case STATS_RESULT:
      return { seq, kind, stats: JSON.parse(body.toString("utf8", 8)) };
    default:
      throw new ProtocolError(`unknown response kind ${kind}`);
  }
}

/** Incremental frame parser over a stream of buffers. */
export class FrameParser {
  private buffer: Buffer = Buffer.alloc(0);

  feed(chunk: Buffer): Array<{ kind: number; body: Buffer }> {
    this.buffer = this.buffer.length
      ? Buffer.concat([this.buffer, chunk])
      : Buffer.from(chunk);
    const frames: Array<{ kind: number; body: Buffer }> = [];
    while (this.buffer.length >= 8) {
      const length = this.buffer.readUInt32LE(0);
      const total = 4 + length;
      if (this.buffer.length < total) break;
      const version = this.buffer.readUInt16LE(4);
      if (version !== VERSION) {
        throw new ProtocolError(`unexpected protocol version ${version}`);
      }
      const kind = this.buffer.readUInt16LE(6);
      frames.push({ kind, body: this.buffer.subarray(8, total) });
      this.buffer = this.buffer.subarray(total);
    }
    return frames;
  }
}
