"""Asynchronous halo exchange between neighboring tiles.

An exchange round for (array, target epoch) has every tile send its border
strips to all neighbors and collect the symmetric strips into its ghost
frame. Rounds are identified globally by (array, epoch): all workers derive
the same round sequence from the shared DAG, so matching needs no extra
handshake. Strips between two tiles owned by the same worker short-circuit
via direct copy and never touch the network.

Thread contract: messages may arrive on any receiver thread; all state
mutation happens under one lock, which also serializes unpacks per tile.
"""

from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .grid import Coords, Tile, TileStore
from .ir import ArrayId

log = logging.getLogger(__name__)

# Direction codes; rank-1 arrays use only E/W over linear tile order.
N, NE, E, SE, S, SW, W, NW = range(8)
VEC_2D = {
    N: (-1, 0), NE: (-1, 1), E: (0, 1), SE: (1, 1),
    S: (1, 0), SW: (1, -1), W: (0, -1), NW: (-1, -1),
}
VEC_1D = {E: (1,), W: (-1,)}
_OPPOSITE = {N: S, S: N, E: W, W: E, NE: SW, SW: NE, NW: SE, SE: NW}


def opposite(direction: int) -> int:
    return _OPPOSITE[direction]


def directions_for(depth: tuple[int, ...]) -> list[int]:
    """Directions that carry a non-empty strip for this depth."""
    if len(depth) == 1:
        return [E, W] if depth[0] > 0 else []
    out = []
    for code, vec in VEC_2D.items():
        if all(depth[d] > 0 for d in range(2) if vec[d] != 0):
            out.append(code)
    return sorted(out)


@dataclass(frozen=True)
class HaloMessage:
    array: ArrayId
    source: Coords
    direction: int
    epoch: int
    payload: bytes


_HALO_HEADER = struct.Struct("<IHHBQI")


def encode_halo(msg: HaloMessage) -> bytes:
    header = _HALO_HEADER.pack(
        msg.array, msg.source[0], msg.source[1], msg.direction,
        msg.epoch, len(msg.payload),
    )
    return header + msg.payload


def decode_halo(buf: bytes) -> HaloMessage:
    array, si, sj, direction, epoch, n = _HALO_HEADER.unpack_from(buf, 0)
    payload = buf[_HALO_HEADER.size:_HALO_HEADER.size + n]
    if len(payload) != n:
        raise ValueError("halo payload truncated")
    return HaloMessage(array, (si, sj), direction, epoch, payload)


def _pack_sel(ext, depth, vec):
    sel = []
    for e, d, v in zip(ext, depth, vec):
        if v < 0:
            sel.append(slice(0, d))
        elif v > 0:
            sel.append(slice(e - d, e))
        else:
            sel.append(slice(0, e))
    return tuple(sel)


def _ghost_sel(ext, depth, vec):
    # vec points from the tile toward the neighbor the strip came from.
    sel = []
    for e, d, v in zip(ext, depth, vec):
        if v < 0:
            sel.append(slice(0, d))
        elif v > 0:
            sel.append(slice(d + e, d + e + d))
        else:
            sel.append(slice(d, d + e))
    return tuple(sel)


class ExchangeManager:
    """Per-worker round bookkeeping, packing, and unpacking."""

    def __init__(self, store: TileStore, worker_id: int,
                 owner_map: dict[Coords, int], send_fn):
        self.store = store
        self.worker_id = worker_id
        self.owner_map = owner_map
        # send_fn(dest_worker, HaloMessage) delivers one strip remotely
        self.send_fn = send_fn
        self.lock = threading.Lock()
        self.round_done_cond = threading.Condition(self.lock)
        self.completions = 0
        # (array, epoch) -> {tile coords -> set of ghost-side directions missing}
        self.active: dict[tuple[ArrayId, int], dict[Coords, set[int]]] = {}
        self.completed: dict[ArrayId, int] = {}
        self.buffered: dict[tuple[ArrayId, int], list[HaloMessage]] = {}
        self.rounds_started: dict[ArrayId, int] = {}
        self.net_messages = 0
        self.stale_dropped = 0

    # -- geometry helpers ---------------------------------------------------

    def _vec(self, array: ArrayId, direction: int) -> tuple[int, ...]:
        rank = self.store.arrays[array].rank
        return VEC_1D[direction] if rank == 1 else VEC_2D[direction]

    def _neighbor(self, array: ArrayId, coords: Coords, direction: int):
        decomp = self.store.decomp
        if self.store.arrays[array].rank == 1:
            k = decomp.linear(coords) + self._vec(array, direction)[0]
            if 0 <= k < decomp.n_tiles:
                return decomp.coords_of(k)
            return None
        tr, tc = decomp.tile_grid
        vi, vj = self._vec(array, direction)
        i, j = coords[0] + vi, coords[1] + vj
        if 0 <= i < tr and 0 <= j < tc:
            return (i, j)
        return None

    def pack(self, tile: Tile, array: ArrayId, direction: int) -> HaloMessage:
        """Copy the border strip adjacent to `direction` into a send buffer."""
        interior = self.store.interior_view(tile, array)
        depth = tile.depths[array]
        sel = _pack_sel(interior.shape, depth, self._vec(array, direction))
        payload = np.ascontiguousarray(interior[sel]).tobytes()
        return HaloMessage(
            array, tile.coords, direction, tile.local_epoch[array], payload
        )

    def _unpack(self, tile: Tile, array: ArrayId, side: int, payload: bytes) -> None:
        """Write a received strip into the ghost region on `side` of the tile."""
        buf = tile.buffers[array]
        depth = tile.depths[array]
        ext = self.store.interior_view(tile, array).shape
        sel = _ghost_sel(ext, depth, self._vec(array, side))
        region = buf[sel]
        data = np.frombuffer(payload, dtype=np.float64).reshape(region.shape)
        region[...] = data

    # -- round lifecycle ----------------------------------------------------

    def ensure_round(self, array: ArrayId, epoch: int) -> bool:
        """Start the exchange round if needed; True when already complete.

        Packs and sends this worker's strips for every owned tile, copies
        strips between co-located tiles directly, and drains any buffered
        early arrivals. Completion may be immediate (no remote neighbors).
        """
        with self.lock:
            if self.completed.get(array, -1) >= epoch:
                return True
            if (array, epoch) in self.active:
                return False
            assert not any(a == array for a, _ in self.active), \
                "at most one in-flight round per array"
            depth = self._depth(array)
            expect: dict[Coords, set[int]] = {}
            to_send: list[tuple[int, HaloMessage]] = []
            for coords in sorted(self.store.tiles):
                tile = self.store.tiles[coords]
                for direction in directions_for(depth):
                    neighbor = self._neighbor(array, coords, direction)
                    if neighbor is None:
                        continue
                    owner = self.owner_map[neighbor]
                    if owner == self.worker_id:
                        # Co-located: pull the strip straight across.
                        src = self.store.tiles[neighbor]
                        strip = self.pack(src, array, opposite(direction))
                        self._unpack(tile, array, direction, strip.payload)
                    else:
                        expect.setdefault(coords, set()).add(direction)
                        to_send.append(
                            (owner, self.pack(tile, array, direction))
                        )
            self.active[(array, epoch)] = expect
            self.rounds_started[array] = self.rounds_started.get(array, 0) + 1
            self.net_messages += len(to_send)
            for msg in self.buffered.pop((array, epoch), []):
                self._apply(msg)
            self._maybe_complete(array, epoch)
            done = self.completed.get(array, -1) >= epoch
        for owner, msg in to_send:
            self.send_fn(owner, msg)
        return done

    def _depth(self, array: ArrayId) -> tuple[int, ...]:
        for tile in self.store.tiles.values():
            return tile.depths[array]
        return ()

    def on_message(self, msg: HaloMessage) -> None:
        """Receive one strip; may arrive before our round starts (buffered)."""
        with self.lock:
            key = (msg.array, msg.epoch)
            if self.completed.get(msg.array, -1) >= msg.epoch:
                self.stale_dropped += 1
                log.warning(
                    "stale halo message dropped: array=%s epoch=%s from=%s",
                    msg.array, msg.epoch, msg.source,
                )
                return
            if key not in self.active:
                self.buffered.setdefault(key, []).append(msg)
                return
            self._apply(msg)
            self._maybe_complete(msg.array, msg.epoch)

    def _apply(self, msg: HaloMessage) -> None:
        vec = self._vec(msg.array, msg.direction)
        if self.store.arrays[msg.array].rank == 1:
            k = self.store.decomp.linear(msg.source) + vec[0]
            target = self.store.decomp.coords_of(k)
        else:
            target = (msg.source[0] + vec[0], msg.source[1] + vec[1])
        side = opposite(msg.direction)
        expect = self.active[(msg.array, msg.epoch)]
        missing = expect.get(target)
        if missing is None or side not in missing:
            self.stale_dropped += 1
            log.warning("unexpected halo strip for tile %s side %s", target, side)
            return
        self._unpack(self.store.tiles[target], msg.array, side, msg.payload)
        missing.discard(side)
        if not missing:
            # This tile has its full halo for the round.
            self.store.tiles[target].ghost_epoch[msg.array] = msg.epoch
            del expect[target]

    def _maybe_complete(self, array: ArrayId, epoch: int) -> None:
        expect = self.active.get((array, epoch))
        if expect is not None and not expect:
            del self.active[(array, epoch)]
            self.completed[array] = epoch
            for tile in self.store.tiles.values():
                tile.ghost_epoch[array] = epoch
            self.completions += 1
            self.round_done_cond.notify_all()

    def round_complete(self, array: ArrayId, epoch: int) -> bool:
        with self.lock:
            return self.completed.get(array, -1) >= epoch

    def ghost_generation(self, array: ArrayId) -> int:
        """Epoch of the last completed round; 0 before any exchange."""
        with self.lock:
            return self.completed.get(array, 0)

    def completion_generation(self) -> int:
        with self.lock:
            return self.completions

    def wait_completion_change(self, seen: int, timeout: float) -> int:
        """Block until a round completes after `seen`; immune to lost wakeups."""
        with self.lock:
            if self.completions == seen:
                self.round_done_cond.wait(timeout)
            return self.completions

    def snapshot_stats(self) -> dict:
        with self.lock:
            return {
                "rounds": dict(self.rounds_started),
                "net_messages": self.net_messages,
                "stale_dropped": self.stale_dropped,
            }
