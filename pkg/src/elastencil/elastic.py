"""Checkpoint manifests and worker-side checkpoint/restore for rescaling.

A rescale moves every tile payload into the per-node memory daemons, writes
one manifest describing where everything went, restarts the worker set, and
pulls the payloads back. The manifest plus the daemon contents reproduce the
pre-rescale array state exactly; ghost frames are not checkpointed and are
re-exchanged after restore via the epoch stale-marking rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .daemon import DaemonClient
from .grid import (
    ArrayInfo,
    Coords,
    Decomposition,
    TileStore,
    adopt_blob,
    checkpoint_blob,
)

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class StageTimings:
    """The four rescale overhead stages, in milliseconds."""

    lb_ms: float
    checkpoint_ms: float
    restart_ms: float
    restore_ms: float

    def as_dict(self) -> dict:
        return {
            "lb_ms": self.lb_ms,
            "checkpoint_ms": self.checkpoint_ms,
            "restart_ms": self.restart_ms,
            "restore_ms": self.restore_ms,
        }


def checkpoint_store(store: TileStore, daemon: DaemonClient,
                     owner: int) -> tuple[list[dict], dict]:
    """Push every (tile, array) payload to the daemon; return records + meta."""
    records = []
    for coords in sorted(store.tiles):
        tile = store.tiles[coords]
        for array in sorted(store.arrays):
            blob = checkpoint_blob(store, tile, array)
            alloc_id = daemon.store(blob)
            records.append({
                "array": array,
                "tile": list(coords),
                "owner": owner,
                "daemon": daemon.address,
                "alloc_id": alloc_id,
                "nbytes": len(blob),
            })
    arrays_meta = {}
    for array, info in store.arrays.items():
        depth = None
        for tile in store.tiles.values():
            depth = list(tile.depths[array])
            break
        arrays_meta[str(array)] = {
            "shape": list(info.shape),
            "depth": depth or [0] * info.rank,
            "local_epoch": store.local_epoch(array),
            "ghost_epoch": store.ghost_epoch(array),
        }
    return records, arrays_meta


def build_manifest(session_seq: int, worker_count: int,
                   decomp: Decomposition | None,
                   arrays_meta: dict, records: list[dict]) -> dict:
    manifest = {
        "version": MANIFEST_VERSION,
        "session_seq": session_seq,
        "worker_count": worker_count,
        "decomp": None,
        "arrays": arrays_meta,
        "allocations": records,
    }
    if decomp is not None:
        manifest["decomp"] = {
            "tile_grid": list(decomp.tile_grid),
            "odf": decomp.odf,
            "initial_workers": decomp.initial_workers,
        }
    return manifest


def write_manifest(path: str, manifest: dict) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh)


def read_manifest(path: str) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    return manifest


def decomp_from_manifest(manifest: dict) -> Decomposition | None:
    spec = manifest.get("decomp")
    if spec is None:
        return None
    return Decomposition(
        tuple(spec["tile_grid"]), spec["odf"], spec["initial_workers"]
    )


def restore_store(manifest: dict, worker_id: int) -> tuple[TileStore | None, dict]:
    """Rebuild this worker's TileStore from the manifest and the daemons.

    Returns (store, per-array ghost depth map for the executor). Payloads are
    retrieved and freed; ghosts come back stale so the next dependent kernel
    re-exchanges them.
    """
    decomp = decomp_from_manifest(manifest)
    if decomp is None:
        return None, {}
    store = TileStore(decomp, [])
    depths = {}
    for key, meta in manifest["arrays"].items():
        array = int(key)
        store.arrays[array] = ArrayInfo(array, tuple(meta["shape"]))
        depths[array] = tuple(meta["depth"])
    clients: dict[str, DaemonClient] = {}
    try:
        for record in manifest["allocations"]:
            if record["owner"] != worker_id:
                continue
            client = clients.get(record["daemon"])
            if client is None:
                client = DaemonClient(record["daemon"])
                clients[record["daemon"]] = client
            blob = client.retrieve_and_free(record["alloc_id"])
            if len(blob) != record["nbytes"]:
                raise ValueError(
                    f"allocation {record['alloc_id']} size mismatch"
                )
            adopt_blob(store, blob)
    finally:
        for client in clients.values():
            client.close()
    # Ghost frames were not checkpointed; advance every local generation so
    # the next dependent kernel re-exchanges them.
    for array in sorted(store.arrays):
        store.bump_local_epoch(array)
    return store, depths


def owner_map_from_manifest(manifest: dict) -> dict[Coords, int]:
    """Tile ownership recorded at checkpoint time (the restore placement)."""
    owners: dict[Coords, int] = {}
    for record in manifest["allocations"]:
        owners[tuple(record["tile"])] = record["owner"]
    decomp = decomp_from_manifest(manifest)
    if decomp is not None and not owners:
        owners = decomp.owner_map(manifest["worker_count"])
    return owners
