"""Tiling of global arrays across workers and per-tile storage.

A job has one Decomposition: odf x initial-workers tiles arranged as the
most-square 2D grid, fixed for the job's lifetime. Every array is split
equally over all tiles (rank-2 arrays by the tile grid, rank-1 arrays by
linear tile order). Each tile stores, per array, one padded buffer holding
the interior plus a ghost frame of the array's current depth, and a pair of
generation epochs (local, ghost) that gates halo exchanges.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IndivisibleShape, InvalidShape, OffsetExceedsTileWidth
from .ir import ArrayId, Shape

Coords = tuple[int, int]


def most_square_factors(n: int) -> tuple[int, int]:
    """Factor pair (r, c) of n, r <= c, minimizing the aspect difference."""
    r = 1
    for d in range(1, int(n ** 0.5) + 1):
        if n % d == 0:
            r = d
    return r, n // r


@dataclass(frozen=True)
class ArrayInfo:
    array: ArrayId
    shape: Shape

    @property
    def rank(self) -> int:
        return len(self.shape)


@dataclass(frozen=True)
class Decomposition:
    tile_grid: Coords
    odf: int
    initial_workers: int

    @property
    def n_tiles(self) -> int:
        return self.tile_grid[0] * self.tile_grid[1]

    def all_coords(self) -> list[Coords]:
        tr, tc = self.tile_grid
        return [(i, j) for i in range(tr) for j in range(tc)]

    def linear(self, coords: Coords) -> int:
        return coords[0] * self.tile_grid[1] + coords[1]

    def coords_of(self, linear: int) -> Coords:
        return divmod(linear, self.tile_grid[1])

    def owner_map(self, worker_count: int) -> dict[Coords, int]:
        """Block-wise row-major tile-to-worker map; pure in its arguments.

        Workers receive contiguous runs of the row-major tile order; when the
        count does not divide the tile count, leading workers get one extra.
        """
        n = self.n_tiles
        owners: dict[Coords, int] = {}
        for w in range(worker_count):
            lo = w * n // worker_count
            hi = (w + 1) * n // worker_count
            for k in range(lo, hi):
                owners[self.coords_of(k)] = w
        return owners

    def check_divisible(self, shape: Shape) -> None:
        if len(shape) == 1:
            if shape[0] % self.n_tiles != 0:
                raise IndivisibleShape(
                    f"extent {shape[0]} not divisible by {self.n_tiles} tiles"
                )
        else:
            for extent, count in zip(shape, self.tile_grid):
                if extent % count != 0:
                    raise IndivisibleShape(
                        f"extent {extent} not divisible by {count} tiles"
                    )

    def tile_extents(self, shape: Shape) -> tuple[int, ...]:
        """Uniform interior extent of one tile for an array of this shape."""
        self.check_divisible(shape)
        if len(shape) == 1:
            return (shape[0] // self.n_tiles,)
        return (shape[0] // self.tile_grid[0], shape[1] // self.tile_grid[1])

    def tile_origin(self, shape: Shape, coords: Coords) -> tuple[int, ...]:
        """Global index of the tile's first interior element for an array."""
        ext = self.tile_extents(shape)
        if len(shape) == 1:
            return (self.linear(coords) * ext[0],)
        return (coords[0] * ext[0], coords[1] * ext[1])


def decompose(global_shape: Shape, workers: int, odf: int) -> Decomposition:
    """Pick the most-square tile grid for odf x workers tiles.

    The shape must divide evenly; unequal tiles are rejected rather than
    padded so gathers stay exact.
    """
    if workers < 1 or odf < 1:
        raise InvalidShape("workers and odf must be >= 1")
    grid = most_square_factors(odf * workers)
    decomp = Decomposition(grid, odf, workers)
    decomp.check_divisible(tuple(global_shape))
    return decomp


@dataclass
class Tile:
    coords: Coords
    # array id -> padded buffer (interior + ghost frame of current depth)
    buffers: dict[ArrayId, np.ndarray] = field(default_factory=dict)
    depths: dict[ArrayId, tuple[int, ...]] = field(default_factory=dict)
    local_epoch: dict[ArrayId, int] = field(default_factory=dict)
    ghost_epoch: dict[ArrayId, int] = field(default_factory=dict)


class TileStore:
    """All tiles owned by one worker plus the shared array metadata."""

    def __init__(self, decomp: Decomposition, owned: list[Coords]):
        self.decomp = decomp
        self.tiles: dict[Coords, Tile] = {c: Tile(c) for c in owned}
        self.arrays: dict[ArrayId, ArrayInfo] = {}

    def create_array(self, info: ArrayInfo) -> None:
        if any(e <= 0 for e in info.shape) or info.rank not in (1, 2):
            raise InvalidShape(f"bad shape {info.shape}")
        self.decomp.check_divisible(info.shape)
        self.arrays[info.array] = info
        ext = self.decomp.tile_extents(info.shape)
        zero_depth = tuple(0 for _ in ext)
        for tile in self.tiles.values():
            tile.buffers[info.array] = np.zeros(ext, dtype=np.float64)
            tile.depths[info.array] = zero_depth
            tile.local_epoch[info.array] = 0
            tile.ghost_epoch[info.array] = 0

    def check_depth_fits(self, array: ArrayId, depth: tuple[int, ...]) -> None:
        """Reject depths that reach the tile interior width in any dimension.

        Pure in the decomposition, so every worker raises identically whether
        or not it owns tiles.
        """
        ext = self.decomp.tile_extents(self.arrays[array].shape)
        for d, e in zip(depth, ext):
            if d >= e:
                raise OffsetExceedsTileWidth(
                    f"ghost depth {d} >= tile width {e} for array {array}"
                )

    def ensure_ghost_capacity(self, array: ArrayId, depth: tuple[int, ...]) -> bool:
        """Grow the ghost frame to a new maximum depth, preserving interiors.

        Returns True when any frame was reallocated; the caller then advances
        the local generation so the zero-filled frame is re-exchanged before
        the next dependent kernel.
        """
        self.check_depth_fits(array, depth)
        grew = False
        for tile in self.tiles.values():
            old = tile.depths[array]
            new = tuple(max(a, b) for a, b in zip(old, depth))
            if new == old:
                continue
            interior = self.interior_view(tile, array).copy()
            padded = tuple(e + 2 * d for e, d in zip(interior.shape, new))
            tile.buffers[array] = np.zeros(padded, dtype=np.float64)
            tile.depths[array] = new
            self.interior_view(tile, array)[...] = interior
            grew = True
        return grew

    def interior_view(self, tile: Tile, array: ArrayId) -> np.ndarray:
        buf = tile.buffers[array]
        d = tile.depths[array]
        sel = tuple(slice(dd, n - dd) for dd, n in zip(d, buf.shape))
        return buf[sel]

    def bump_local_epoch(self, array: ArrayId) -> None:
        for tile in self.tiles.values():
            tile.local_epoch[array] += 1

    def local_epoch(self, array: ArrayId) -> int:
        values = {t.local_epoch[array] for t in self.tiles.values()}
        if len(values) > 1:
            raise AssertionError(f"non-uniform local epochs for array {array}")
        return values.pop() if values else 0

    def ghost_epoch(self, array: ArrayId) -> int:
        values = {t.ghost_epoch[array] for t in self.tiles.values()}
        if len(values) > 1:
            raise AssertionError(f"non-uniform ghost epochs for array {array}")
        return values.pop() if values else 0

    def gather_slice_pieces(self, array: ArrayId, bounds: tuple[tuple[int, int], ...]):
        """Intersections of a global slice with every owned tile's interior.

        Yields (global piece bounds, contiguous float64 block).
        """
        info = self.arrays[array]
        for tile in self.tiles.values():
            origin = self.decomp.tile_origin(info.shape, tile.coords)
            ext = self.decomp.tile_extents(info.shape)
            piece = []
            for (lo, hi), o, e in zip(bounds, origin, ext):
                a, b = max(lo, o), min(hi, o + e)
                if a >= b:
                    piece = None
                    break
                piece.append((a, b))
            if piece is None:
                continue
            view = self.interior_view(tile, array)
            sel = tuple(
                slice(a - o, b - o) for (a, b), o in zip(piece, origin)
            )
            yield tuple(piece), np.ascontiguousarray(view[sel])


# ---------------------------------------------------------------------------
# Checkpoint payload format (consumed by the elastic module)

_BLOB_HEADER = struct.Struct("<IHHBQQQQQ")  # array, tr, tc, rank, e0, e1, d0, d1, epoch


def checkpoint_blob(store: TileStore, tile: Tile, array: ArrayId) -> bytes:
    """Header + raw little-endian interior payload; ghost frames are dropped."""
    interior = np.ascontiguousarray(store.interior_view(tile, array))
    depth = tile.depths[array]
    ext = interior.shape
    e1 = ext[1] if len(ext) > 1 else 0
    d1 = depth[1] if len(depth) > 1 else 0
    header = _BLOB_HEADER.pack(
        array, tile.coords[0], tile.coords[1], len(ext),
        ext[0], e1, depth[0], d1, tile.local_epoch[array],
    )
    return header + interior.tobytes()


def restore_blob(blob: bytes):
    """Decode a checkpoint blob -> (array, coords, depth, local_epoch, interior)."""
    array, tr, tc, rank, e0, e1, d0, d1, epoch = _BLOB_HEADER.unpack_from(blob, 0)
    ext = (e0,) if rank == 1 else (e0, e1)
    depth = (d0,) if rank == 1 else (d0, d1)
    interior = np.frombuffer(
        blob, dtype=np.float64, offset=_BLOB_HEADER.size
    ).reshape(ext).copy()
    return array, (tr, tc), depth, epoch, interior


def adopt_blob(store: TileStore, blob: bytes) -> None:
    """Install a checkpointed tile payload; the ghost frame comes back zeroed.

    Epochs are taken from the blob; the adopting path bumps local epochs
    afterwards (uniformly across tiles and workers) to force a re-exchange.
    """
    array, coords, depth, epoch, interior = restore_blob(blob)
    tile = store.tiles.setdefault(coords, Tile(coords))
    padded = tuple(e + 2 * d for e, d in zip(interior.shape, depth))
    tile.buffers[array] = np.zeros(padded, dtype=np.float64)
    tile.depths[array] = depth
    tile.local_epoch[array] = epoch
    tile.ghost_epoch[array] = epoch
    store.interior_view(tile, array)[...] = interior
