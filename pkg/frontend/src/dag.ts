/**
 * Statement DAG construction mirroring the server's validation rules, plus
 * the consecutive-node fusion pass and the canonical binary encoding.
 *
 * The encoding must be byte-identical to the server's own encoder for the
 * same program (see PROTOCOL.md for the grammar and the canonicalization
 * rules: preorder slot numbering, structural AST dedup in first-use order,
 * edges sorted by (from, to, kind)).
 */
import {
  AstNode,
  BINARY_OPS,
  BinaryExpr,
  ConstExpr,
  Expr,
  RefExpr,
  UNARY_OPS,
  UnaryExpr,
} from "./expr";
import { Bounds, SliceArg, extentOf, normalizeSlices } from "./slice";

export class SelfDependencyError extends Error {}
export class ShapeMismatchError extends Error {}

export interface Statement {
  astId: number;
  output: number;
  outputBounds: Bounds;
  inputs: number[];
}

export interface DagNode {
  nodeId: number;
  statements: Statement[];
}

export type EdgeKind = 0 | 1 | 2; // true, anti, output

export interface Ast {
  root: AstNode;
  key: string; // structural identity: hex of the encoded tree
  bytes: Buffer;
}

function sameExtent(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

export class DagBuilder {
  nodes: DagNode[] = [];
  edges = new Set<string>(); // "from,to,kind"
  astTable: Ast[] = [];
  private astIndex = new Map<string, number>();
  private readers = new Map<number, number[]>();
  private writers = new Map<number, number[]>();

  constructor(public shapes: Map<number, number[]>) {}

  get nodeCount(): number {
    return this.nodes.length;
  }

  /** Bind an expression: distinct input arrays become slots in preorder. */
  buildStatement(expr: Expr, output: number, outputSlices: SliceArg[]): Statement {
    const outShape = this.shapes.get(output);
    if (!outShape) throw new ShapeMismatchError(`unknown array ${output}`);
    const outputBounds = normalizeSlices(outputSlices, outShape);
    const extent = extentOf(outputBounds);
    const bindings: number[] = [];

    const convert = (node: Expr): AstNode => {
      if (node instanceof ConstExpr) {
        return { kind: "const", value: node.value };
      }
      if (node instanceof RefExpr) {
        if (node.arrayId === output) {
          throw new SelfDependencyError(
            `array ${output} appears as both output and input`,
          );
        }
        if (!sameExtent(node.shape, outShape)) {
          throw new ShapeMismatchError(
            `array ${node.arrayId} shape differs from output shape`,
          );
        }
        let slot = bindings.indexOf(node.arrayId);
        if (slot < 0) {
          slot = bindings.length;
          bindings.push(node.arrayId);
        }
        const bounds = normalizeSlices(node.slices, node.shape);
        if (!sameExtent(extentOf(bounds), extent)) {
          throw new ShapeMismatchError(
            `input extent ${extentOf(bounds)} != output extent ${extent}`,
          );
        }
        return { kind: "slot", slot, bounds };
      }
      if (node instanceof UnaryExpr) {
        return { kind: "unary", op: node.op, child: convert(node.child) };
      }
      if (node instanceof BinaryExpr) {
        return {
          kind: "binary",
          op: node.op,
          left: convert(node.left),
          right: convert(node.right),
        };
      }
      throw new ShapeMismatchError(`cannot bind ${node}`);
    };

    const root = convert(expr);
    return {
      astId: this.internAst(root),
      output,
      outputBounds,
      inputs: bindings,
    };
  }

  internAst(root: AstNode): number {
    const bytes = encodeExpr(root);
    const key = bytes.toString("hex");
    const existing = this.astIndex.get(key);
    if (existing !== undefined) return existing;
    this.astTable.push({ root, key, bytes });
    this.astIndex.set(key, this.astTable.length - 1);
    return this.astTable.length - 1;
  }

  addStatement(stmt: Statement): number {
    const nodeId = this.nodes.length;
    const reads = new Set(stmt.inputs);
    for (const array of reads) {
      for (const w of this.writers.get(array) ?? []) {
        this.edges.add(`${w},${nodeId},0`);
      }
    }
    for (const r of this.readers.get(stmt.output) ?? []) {
      this.edges.add(`${r},${nodeId},1`);
    }
    for (const w of this.writers.get(stmt.output) ?? []) {
      this.edges.add(`${w},${nodeId},2`);
    }
    for (const array of reads) {
      const list = this.readers.get(array) ?? [];
      list.push(nodeId);
      this.readers.set(array, list);
    }
    const wlist = this.writers.get(stmt.output) ?? [];
    wlist.push(nodeId);
    this.writers.set(stmt.output, wlist);
    this.nodes.push({ nodeId, statements: [stmt] });
    return nodeId;
  }
}

/** Merge runs of consecutive nodes with equal extent and no edges between. */
export function fuse(
  nodes: DagNode[],
  edges: Set<string>,
  astTable: Ast[],
): { nodes: DagNode[]; edges: Set<string>; astTable: Ast[] } {
  if (nodes.length === 0) return { nodes: [], edges: new Set(), astTable };
  const pairs = new Set<string>();
  for (const edge of edges) {
    const [a, b] = edge.split(",");
    pairs.add(`${a},${b}`);
  }
  const groups: DagNode[][] = [[nodes[0]]];
  for (const node of nodes.slice(1)) {
    const group = groups[groups.length - 1];
    const groupExtent = extentOf(group[0].statements[0].outputBounds);
    const nodeExtent = extentOf(node.statements[0].outputBounds);
    const blocked = group.some((m) => pairs.has(`${m.nodeId},${node.nodeId}`));
    if (sameExtent(groupExtent, nodeExtent) && !blocked) {
      group.push(node);
    } else {
      groups.push([node]);
    }
  }
  const fused: DagNode[] = groups.map((group, i) => ({
    nodeId: i,
    statements: group.flatMap((m) => m.statements),
  }));
  return { nodes: fused, edges: computeEdges(fused), astTable };
}

export function computeEdges(nodes: DagNode[]): Set<string> {
  const edges = new Set<string>();
  const readers = new Map<number, number[]>();
  const writers = new Map<number, number[]>();
  for (const node of nodes) {
    const reads = new Set(node.statements.flatMap((s) => s.inputs));
    const writes = new Set(node.statements.map((s) => s.output));
    for (const array of reads) {
      for (const w of writers.get(array) ?? []) {
        edges.add(`${w},${node.nodeId},0`);
      }
    }
    for (const array of writes) {
      for (const r of readers.get(array) ?? []) {
        edges.add(`${r},${node.nodeId},1`);
      }
      for (const w of writers.get(array) ?? []) {
        edges.add(`${w},${node.nodeId},2`);
      }
    }
    for (const array of reads) {
      const list = readers.get(array) ?? [];
      list.push(node.nodeId);
      readers.set(array, list);
    }
    for (const array of writes) {
      const list = writers.get(array) ?? [];
      list.push(node.nodeId);
      writers.set(array, list);
    }
  }
  return edges;
}

// ---------------------------------------------------------------------------
// Binary encoding

function writeU64(buf: Buffer, offset: number, value: number): number {
  buf.writeUInt32LE(value >>> 0, offset);
  buf.writeUInt32LE(Math.floor(value / 2 ** 32), offset + 4);
  return offset + 8;
}

export function encodeBounds(bounds: Bounds): Buffer {
  const buf = Buffer.alloc(1 + bounds.length * 16);
  buf.writeUInt8(bounds.length, 0);
  let pos = 1;
  for (const [lo, hi] of bounds) {
    pos = writeU64(buf, pos, lo);
    pos = writeU64(buf, pos, hi);
  }
  return buf;
}

export function encodeExpr(node: AstNode): Buffer {
  const parts: Buffer[] = [];
  const walk = (n: AstNode): void => {
    if (n.kind === "const") {
      const buf = Buffer.alloc(9);
      buf.writeUInt8(0, 0);
      buf.writeDoubleLE(n.value, 1);
      parts.push(buf);
    } else if (n.kind === "slot") {
      const head = Buffer.alloc(5);
      head.writeUInt8(1, 0);
      head.writeUInt32LE(n.slot, 1);
      parts.push(head, encodeBounds(n.bounds));
    } else if (n.kind === "unary") {
      parts.push(Buffer.from([2, UNARY_OPS.indexOf(n.op)]));
      walk(n.child);
    } else {
      parts.push(Buffer.from([3, BINARY_OPS.indexOf(n.op)]));
      walk(n.left);
      walk(n.right);
    }
  };
  walk(node);
  return Buffer.concat(parts);
}

export function encodeDag(
  nodes: DagNode[],
  edges: Set<string>,
  astTable: Ast[],
): Buffer {
  const parts: Buffer[] = [];
  const u32 = (v: number) => {
    const b = Buffer.alloc(4);
    b.writeUInt32LE(v, 0);
    return b;
  };
  parts.push(u32(astTable.length));
  for (const ast of astTable) {
    parts.push(u32(ast.bytes.length), ast.bytes);
  }
  parts.push(u32(nodes.length));
  for (const node of nodes) {
    parts.push(u32(node.nodeId), u32(node.statements.length));
    for (const stmt of node.statements) {
      parts.push(u32(stmt.astId), u32(stmt.output));
      parts.push(encodeBounds(stmt.outputBounds));
      parts.push(u32(stmt.inputs.length));
      for (const array of stmt.inputs) parts.push(u32(array));
    }
  }
  const edgeList = [...edges]
    .map((edge) => edge.split(",").map(Number) as [number, number, number])
    .sort((a, b) => a[0] - b[0] || a[1] - b[1] || a[2] - b[2]);
  parts.push(u32(edgeList.length));
  for (const [from, to, kind] of edgeList) {
    const buf = Buffer.alloc(9);
    buf.writeUInt32LE(from, 0);
    buf.writeUInt32LE(to, 4);
    buf.writeUInt8(kind, 8);
    parts.push(buf);
  }
  return Buffer.concat(parts);
}
