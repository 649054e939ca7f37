"""In-process multi-worker harness for executor/exchange tests.

Wires N TileStore+Executor pairs with direct message delivery (optionally
through a jitter thread pool that randomizes lane interleavings) so the
data-movement logic can be exercised without sockets or subprocesses. The
real runtime drives the same classes through the wire protocol.
"""

from __future__ import annotations

import random
import threading
import time

import numpy as np

from elastencil.exchange import ExchangeManager, encode_halo, decode_halo
from elastencil.executor import BatchStats, Executor
from elastencil.grid import ArrayInfo, TileStore, decompose
from elastencil.ir import Dag


class LocalMesh:
    def __init__(self, workers: int, odf: int = 1, jitter_seed: int | None = None):
        self.workers = workers
        self.odf = odf
        self.jitter = random.Random(jitter_seed) if jitter_seed is not None else None
        self.decomp = None
        self.stores: list[TileStore] = []
        self.managers: list[ExchangeManager] = []
        self.executors: list[Executor] = []
        self._next_id = 0
        self._jitter_threads: list[threading.Thread] = []

    def create_array(self, shape) -> int:
        if self.decomp is None:
            self.decomp = decompose(tuple(shape), self.workers, self.odf)
            owner_map = self.decomp.owner_map(self.workers)
            for w in range(self.workers):
                owned = [c for c, o in owner_map.items() if o == w]
                store = TileStore(self.decomp, owned)
                self.stores.append(store)
            for w in range(self.workers):
                manager = ExchangeManager(
                    self.stores[w], w, owner_map, self._sender(w)
                )
                self.managers.append(manager)
                self.executors.append(Executor(self.stores[w], manager))
        array = self._next_id
        self._next_id += 1
        for store in self.stores:
            store.create_array(ArrayInfo(array, tuple(shape)))
        return array

    def _sender(self, src: int):
        def send(dest: int, msg) -> None:
            # Round-trip through the wire encoding to keep it honest.
            payload = encode_halo(msg)
            if self.jitter is None:
                self.managers[dest].on_message(decode_halo(payload))
            else:
                delay = self.jitter.random() * 0.002
                t = threading.Thread(
                    target=self._delayed_deliver, args=(dest, payload, delay)
                )
                t.start()
                self._jitter_threads.append(t)

        return send

    def _delayed_deliver(self, dest: int, payload: bytes, delay: float) -> None:
        time.sleep(delay)
        self.managers[dest].on_message(decode_halo(payload))

    def run(self, dag: Dag) -> list[BatchStats]:
        results: list[BatchStats | None] = [None] * self.workers
        errors: list[Exception] = []

        def work(w: int) -> None:
            try:
                results[w] = self.executors[w].execute_batch(dag)
            except Exception as exc:  # surfaced after join
                errors.append(exc)

        threads = [
            threading.Thread(target=work, args=(w,)) for w in range(self.workers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for t in self._jitter_threads:
            t.join()
        self._jitter_threads.clear()
        if errors:
            raise errors[0]
        return results  # type: ignore[return-value]

    def fetch(self, array: int, bounds=None) -> np.ndarray:
        info = self.stores[0].arrays[array] if self.stores[0].arrays else None
        for store in self.stores:
            if array in store.arrays:
                info = store.arrays[array]
                break
        assert info is not None
        if bounds is None:
            bounds = tuple((0, e) for e in info.shape)
        out = np.zeros(tuple(b - a for a, b in bounds), dtype=np.float64)
        for store in self.stores:
            for piece, block in store.gather_slice_pieces(array, bounds):
                sel = tuple(
                    slice(a - lo, b - lo) for (a, b), (lo, _) in zip(piece, bounds)
                )
                out[sel] = block
        return out

    def rounds_by_array(self) -> dict[int, int]:
        # Round counts are identical on every worker by construction.
        counts = [m.snapshot_stats()["rounds"] for m in self.managers]
        for other in counts[1:]:
            assert other == counts[0], "workers disagree on round counts"
        return counts[0]
