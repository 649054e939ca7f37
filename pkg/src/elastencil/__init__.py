"""Distributed, elastic stencil-computation runtime.

Client programs build slice-expression statements over distributed arrays;
a coordinator broadcasts fused statement DAGs to tile-owning workers that
evaluate kernels with halo exchange; the whole job can shrink or expand its
worker count at runtime via checkpoint, memory daemons, and process restart.
"""

from .client import BatchingSession, Session
from .elastic import StageTimings
from .ir import DagBuilder, add, cst, div, mul, ref, sub
from .launcher import JobConfig, Launcher

__all__ = [
    "BatchingSession",
    "DagBuilder",
    "JobConfig",
    "Launcher",
    "Session",
    "StageTimings",
    "add",
    "cst",
    "div",
    "mul",
    "ref",
    "sub",
]
