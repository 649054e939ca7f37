export { Slice, SliceError, s } from "./slice";
export {
  BinaryExpr,
  ConstExpr,
  Expr,
  RefExpr,
  UnaryExpr,
  add,
  c,
  div,
  mul,
  sub,
} from "./expr";
export {
  DagBuilder,
  SelfDependencyError,
  ShapeMismatchError,
  encodeDag,
  fuse,
} from "./dag";
export { ServerError, StageTimings } from "./wire";
export { LazyArray, SessionOptions, StencilSession } from "./session";
