/**
 * Python-style slice over one dimension. Use the `s` helper to construct;
 * bare numbers select a single index. Steps other than 1 are rejected
 * immediately: the runtime only exchanges unit-stride ghost regions.
 */
export class Slice {
  constructor(
    public start: number | null = null,
    public stop: number | null = null,
    public step: number | null = null,
  ) {}
}

export function s(
  start: number | null = null,
  stop: number | null = null,
  step: number | null = null,
): Slice {
  return new Slice(start, stop, step);
}

export type SliceArg = Slice | number;

/** Normalized per-dimension bounds: 0 <= start < stop <= extent, step 1. */
export type Bounds = Array<[number, number]>;

export class SliceError extends Error {}

export function normalizeSlices(args: SliceArg[], shape: number[]): Bounds {
  if (args.length !== shape.length) {
    throw new SliceError(
      `slice has ${args.length} dims, array has ${shape.length}`,
    );
  }
  const bounds: Bounds = [];
  for (let d = 0; d < shape.length; d++) {
    const extent = shape[d];
    const arg = args[d];
    let start: number | null;
    let stop: number | null;
    if (typeof arg === "number") {
      if (!Number.isInteger(arg)) throw new SliceError(`index ${arg} not an integer`);
      start = arg;
      stop = arg === -1 ? null : arg + 1;
    } else {
      if (arg.step !== null && arg.step !== 1) {
        throw new SliceError(`step ${arg.step} not supported`);
      }
      start = arg.start;
      stop = arg.stop;
    }
    let lo = start === null ? 0 : start;
    let hi = stop === null ? extent : stop;
    if (lo < 0) lo += extent;
    if (hi < 0) hi += extent;
    if (!(0 <= lo && lo < hi && hi <= extent)) {
      throw new SliceError(`slice [${lo}:${hi}] invalid for extent ${extent}`);
    }
    bounds.push([lo, hi]);
  }
  return bounds;
}

export function extentOf(bounds: Bounds): number[] {
  return bounds.map(([lo, hi]) => hi - lo);
}

export function fullBounds(shape: number[]): Bounds {
  return shape.map((extent) => [0, extent]);
}
