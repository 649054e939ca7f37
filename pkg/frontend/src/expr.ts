/**
 * Client-side expression trees. Leaves are constants or slices of lazy
 * arrays; nothing is ever evaluated locally. Methods chain so stencil
 * updates read close to the math.
 */
import { Bounds, SliceArg } from "./slice";

export type UnaryOp = "neg" | "abs" | "sqrt";
export type BinaryOp = "add" | "sub" | "mul" | "div";

export const UNARY_OPS: UnaryOp[] = ["neg", "abs", "sqrt"];
export const BINARY_OPS: BinaryOp[] = ["add", "sub", "mul", "div"];

export type Operand = Expr | number;

export abstract class Expr {
  add(other: Operand): Expr {
    return new BinaryExpr("add", this, lift(other));
  }
  sub(other: Operand): Expr {
    return new BinaryExpr("sub", this, lift(other));
  }
  mul(other: Operand): Expr {
    return new BinaryExpr("mul", this, lift(other));
  }
  div(other: Operand): Expr {
    return new BinaryExpr("div", this, lift(other));
  }
  neg(): Expr {
    return new UnaryExpr("neg", this);
  }
  abs(): Expr {
    return new UnaryExpr("abs", this);
  }
  sqrt(): Expr {
    return new UnaryExpr("sqrt", this);
  }
}

export class ConstExpr extends Expr {
  constructor(public value: number) {
    super();
  }
}

export class UnaryExpr extends Expr {
  constructor(public op: UnaryOp, public child: Expr) {
    super();
  }
}

export class BinaryExpr extends Expr {
  constructor(public op: BinaryOp, public left: Expr, public right: Expr) {
    super();
  }
}

/** Reference to a slice of a concrete array, before slot extraction. */
export class RefExpr extends Expr {
  constructor(
    public arrayId: number,
    public shape: number[],
    public slices: SliceArg[],
  ) {
    super();
  }
}

export function lift(value: Operand): Expr {
  return typeof value === "number" ? new ConstExpr(value) : value;
}

export function c(value: number): ConstExpr {
  return new ConstExpr(value);
}

export function add(a: Operand, b: Operand): Expr {
  return lift(a).add(b);
}
export function sub(a: Operand, b: Operand): Expr {
  return lift(a).sub(b);
}
export function mul(a: Operand, b: Operand): Expr {
  return lift(a).mul(b);
}
export function div(a: Operand, b: Operand): Expr {
  return lift(a).div(b);
}

/** Parameterized tree: array operands replaced by formal slot indexes. */
export type AstNode =
  | { kind: "const"; value: number }
  | { kind: "slot"; slot: number; bounds: Bounds }
  | { kind: "unary"; op: UnaryOp; child: AstNode }
  | { kind: "binary"; op: BinaryOp; left: AstNode; right: AstNode };
