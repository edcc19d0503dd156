"""Message-passing transport between ranks.

Ranks never share mutable state; everything flows through a :class:`Comm`.
Two realizations exist:

* ``thread``: ranks are threads of the current process, each pair of ranks
  connected by a FIFO mailbox.
* ``socket``: ranks are separate processes connected pairwise over loopback
  TCP sockets (``multiprocessing.connection``).

Collectives (``allreduce``, ``allgather``, ``bcast``, ``barrier``) are built on
point-to-point messages through rank 0, so summation order is fixed by rank
order and results are deterministic for a given partition.
"""

from __future__ import annotations

import collections
import multiprocessing as mp
import queue
import threading
import traceback
from multiprocessing.connection import Client, Listener

import numpy as np

from .errors import ProtocolError

_POLL = 0.05
_ALLREDUCE = -1
_ALLGATHER = -2
_BCAST = -3
_BARRIER = -4


class RankAborted(ProtocolError):
    """Another rank failed; this rank can no longer make progress."""


class Comm:
    """Point-to-point and collective communication for one rank.

    Subclasses supply ``_put(dest, item)`` and ``_take(src)``; everything else,
    including tag matching and the instrumentation counters, lives here.
    """

    def __init__(self, rank: int, size: int):
        self.rank = rank
        self.size = size
        self.events = collections.Counter()
        self._stash = collections.defaultdict(collections.deque)

    @property
    def reductions(self) -> int:
        return self.events["allreduce"]

    # -- point to point -------------------------------------------------
    def send(self, dest: int, obj, tag: int = 0) -> None:
        if not 0 <= dest < self.size:
            raise ProtocolError(f"rank {self.rank}: invalid destination {dest}")
        self.events["send"] += 1
        self._put(dest, (tag, obj))

    def recv(self, src: int, tag: int = 0):
        if not 0 <= src < self.size:
            raise ProtocolError(f"rank {self.rank}: invalid source {src}")
        stash = self._stash[src]
        for i, (t, obj) in enumerate(stash):
            if t == tag:
                del stash[i]
                return obj
        while True:
            t, obj = self._take(src)
            if t == tag:
                return obj
            stash.append((t, obj))

    # -- collectives ----------------------------------------------------
    def allreduce(self, values) -> np.ndarray:
        """Global sum of a scalar or 1-D array; one reduction event."""
        self.events["allreduce"] += 1
        part = np.atleast_1d(np.asarray(values, dtype=np.float64))
        if self.size == 1:
            return part.copy()
        if self.rank == 0:
            total = part.copy()
            for src in range(1, self.size):
                other = self.recv(src, _ALLREDUCE)
                if other.shape != total.shape:
                    raise ProtocolError(
                        f"allreduce shape mismatch: {other.shape} from rank {src}"
                    )
                total += other
            for dest in range(1, self.size):
                self._put(dest, (_ALLREDUCE, total))
            return total.copy()
        self._put(0, (_ALLREDUCE, part))
        return self.recv(0, _ALLREDUCE).copy()

    def allgather(self, obj) -> list:
        self.events["allgather"] += 1
        if self.size == 1:
            return [obj]
        if self.rank == 0:
            items = [obj] + [self.recv(src, _ALLGATHER) for src in range(1, self.size)]
            for dest in range(1, self.size):
                self._put(dest, (_ALLGATHER, items))
            return items
        self._put(0, (_ALLGATHER, obj))
        return self.recv(0, _ALLGATHER)

    def bcast(self, obj, root: int = 0):
        self.events["bcast"] += 1
        if self.size == 1:
            return obj
        if self.rank == root:
            for dest in range(self.size):
                if dest != root:
                    self._put(dest, (_BCAST, obj))
            return obj
        return self.recv(root, _BCAST)

    def barrier(self) -> None:
        self.events["barrier"] += 1
        if self.size == 1:
            return
        if self.rank == 0:
            for src in range(1, self.size):
                self.recv(src, _BARRIER)
            for dest in range(1, self.size):
                self._put(dest, (_BARRIER, None))
        else:
            self._put(0, (_BARRIER, None))
            self.recv(0, _BARRIER)

    def _put(self, dest, item):  # pragma: no cover - abstract
        raise NotImplementedError

    def _take(self, src):  # pragma: no cover - abstract
        raise NotImplementedError


class SerialComm(Comm):
    """Single-rank communicator; collectives are identities but still counted."""

    def __init__(self):
        super().__init__(0, 1)
        self._q = collections.deque()

    def _put(self, dest, item):
        self._q.append(item)

    def _take(self, src):
        if not self._q:
            raise ProtocolError("recv on empty serial mailbox would block forever")
        return self._q.popleft()


class _ThreadWorld:
    def __init__(self, size: int):
        self.size = size
        self.boxes = {(s, d): queue.Queue() for s in range(size) for d in range(size)}
        self.aborted = threading.Event()


class ThreadComm(Comm):
    def __init__(self, world: _ThreadWorld, rank: int):
        super().__init__(rank, world.size)
        self._world = world

    def _put(self, dest, item):
        self._world.boxes[(self.rank, dest)].put(item)

    def _take(self, src):
        box = self._world.boxes[(src, self.rank)]
        while True:
            try:
                return box.get(timeout=_POLL)
            except queue.Empty:
                if self._world.aborted.is_set():
                    raise RankAborted(f"rank {self.rank}: peer failure") from None


def _run_threads(fn, size, args, kwargs):
    world = _ThreadWorld(size)
    results = [None] * size
    errors = [None] * size

    def body(rank):
        comm = ThreadComm(world, rank)
        try:
            results[rank] = fn(comm, *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001 - re-raised in caller
            errors[rank] = exc
            world.aborted.set()

    threads = [threading.Thread(target=body, args=(r,), name=f"rank{r}") for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    _raise_first(errors)
    return results


def _raise_first(errors):
    real = [e for e in errors if e is not None and not isinstance(e, RankAborted)]
    if real:
        raise real[0]
    aborted = [e for e in errors if e is not None]
    if aborted:
        raise aborted[0]


class SocketComm(Comm):
    """Rank in its own process, pairwise loopback connections to all peers."""

    def __init__(self, rank: int, size: int, conns: dict):
        super().__init__(rank, size)
        self._conns = conns
        self._self_box = queue.Queue()
        self._boxes = {src: queue.Queue() for src in conns}
        self._send_lock = {src: threading.Lock() for src in conns}
        for src, conn in conns.items():
            threading.Thread(target=self._pump, args=(src, conn), daemon=True).start()

    def _pump(self, src, conn):
        # Drain eagerly so that a peer's send never blocks on a full socket buffer.
        box = self._boxes[src]
        while True:
            try:
                box.put(conn.recv())
            except (EOFError, OSError):
                box.put(None)
                return

    def _put(self, dest, item):
        if dest == self.rank:
            self._self_box.put(item)
            return
        with self._send_lock[dest]:
            self._conns[dest].send(item)

    def _take(self, src):
        if src == self.rank:
            return self._self_box.get()
        item = self._boxes[src].get()
        if item is None:
            raise RankAborted(f"rank {self.rank}: connection to rank {src} closed")
        return item

    def close(self):
        for conn in self._conns.values():
            conn.close()


def _socket_main(rank, size, addr_q, book_q, result_q, fn, args, kwargs):
    conns = {}
    try:
        listener = Listener(("127.0.0.1", 0), authkey=b"sparsewatt")
        addr_q.put((rank, listener.address))
        book = book_q.get()
        for peer in range(rank):
            c = Client(book[peer], authkey=b"sparsewatt")
            c.send(rank)
            conns[peer] = c
        for _ in range(rank + 1, size):
            c = listener.accept()
            conns[c.recv()] = c
        listener.close()
        comm = SocketComm(rank, size, conns)
        value = fn(comm, *args, **kwargs)
        comm.barrier()
        result_q.put((rank, True, value))
    except BaseException as exc:  # noqa: BLE001 - shipped to parent
        try:
            result_q.put((rank, False, exc))
        except Exception:  # unpicklable exception
            result_q.put((rank, False, ProtocolError(traceback.format_exc())))
    finally:
        for c in conns.values():
            c.close()


def _run_sockets(fn, size, args, kwargs):
    ctx = mp.get_context("spawn")
    addr_q = ctx.Queue()
    result_q = ctx.Queue()
    book_qs = [ctx.Queue() for _ in range(size)]
    procs = [
        ctx.Process(
            target=_socket_main,
            args=(r, size, addr_q, book_qs[r], result_q, fn, args, kwargs),
            daemon=True,
        )
        for r in range(size)
    ]
    for p in procs:
        p.start()
    book = dict(addr_q.get() for _ in range(size))
    for q in book_qs:
        q.put(book)
    results = [None] * size
    errors = [None] * size
    for _ in range(size):
        rank, ok, value = result_q.get()
        if ok:
            results[rank] = value
        else:
            errors[rank] = value
    for p in procs:
        p.join()
    _raise_first(errors)
    return results


def run_ranks(fn, size: int, *args, transport: str = "thread", **kwargs) -> list:
    """Run ``fn(comm, *args, **kwargs)`` on ``size`` ranks; return per-rank results.

    The first non-abort exception raised by any rank is re-raised here.
    For ``transport="socket"`` the function and its arguments must be picklable.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if transport == "thread":
        if size == 1:
            return [fn(SerialComm(), *args, **kwargs)]
        return _run_threads(fn, size, args, kwargs)
    if transport == "socket":
        return _run_sockets(fn, size, args, kwargs)
    raise ValueError(f"unknown transport {transport!r}")
