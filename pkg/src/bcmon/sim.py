"""Deterministic discrete-event scheduler over isolated processes.

Every observable effect of a handler (outgoing messages, trace records) is
buffered in its :class:`Context` and committed by the scheduler afterwards,
in event order. Because a handler only touches its own process's state,
running all events that share a timestamp concurrently (``parallel=True``)
and committing them in the original order gives exactly the same sequence
numbers, trace and final state as running them one by one.

Time is an integer number of virtual milliseconds.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable

log = logging.getLogger(__name__)


def derive_seed(*parts: Any) -> int:
    key = "|".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")


@dataclass(frozen=True)
class Crash:
    """Control message: the receiving process stops handling messages."""


@dataclass(frozen=True)
class Recover:
    pass


class Process:
    """Base class for simulated actors. Subclasses implement ``on_message``."""

    def __init__(self, pid: str):
        self.pid = pid
        self.crashed = False
        self.busy_until = 0
        self.work_carry = 0.0
        self.rng: random.Random = random.Random(0)

    def on_message(self, ctx: "Context", msg: Any) -> None:
        raise NotImplementedError

    def on_start(self, ctx: "Context") -> None:
        pass

    def on_recover(self, ctx: "Context") -> None:
        """Called after a crash ends; state is retained, lost timers are not."""


class Context:
    """Handle given to a process while it processes one event."""

    __slots__ = ("now", "proc", "outbox", "records")

    def __init__(self, now: int, proc: Process):
        self.now = now
        self.proc = proc
        self.outbox: list[tuple[int, str, Any]] = []
        self.records: list[dict] = []

    @property
    def pid(self) -> str:
        return self.proc.pid

    @property
    def rng(self) -> random.Random:
        return self.proc.rng

    @property
    def ready_at(self) -> int:
        """Earliest time output of the current handler can leave the process."""
        return max(self.now, self.proc.busy_until)

    def work(self, ms: float) -> None:
        """Charge ``ms`` of serial processing time to this process.

        Fractions carry over to later charges, so many sub-millisecond costs
        still add up on the integer clock.
        """
        total = self.proc.work_carry + ms
        whole = int(total)
        self.proc.work_carry = total - whole
        self.proc.busy_until = self.ready_at + whole

    def send(self, dst: str, msg: Any, delay: int = 0) -> None:
        self.outbox.append((self.ready_at + int(delay), dst, msg))

    def timer(self, delay: int, msg: Any) -> None:
        # timers are not held back by the busy model
        self.outbox.append((self.now + int(delay), self.proc.pid, msg))

    def log(self, kind: str, **fields: Any) -> None:
        self.records.append({"t": self.now, "pid": self.proc.pid, "kind": kind, **fields})


class Scheduler:
    def __init__(self, seed: int = 0, *, parallel: bool = False, workers: int = 4):
        self.seed = seed
        self.parallel = parallel
        self.workers = workers
        self.now = 0
        self.procs: dict[str, Process] = {}
        self.trace: list[dict] = []
        self.events_processed = 0
        self.dropped = 0
        self._heap: list[tuple[int, int, str, Any]] = []
        self._seq = 0
        self._pool: ThreadPoolExecutor | None = None

    def add(self, proc: Process) -> Process:
        if proc.pid in self.procs:
            raise ValueError(f"duplicate process id {proc.pid!r}")
        proc.rng = random.Random(derive_seed(self.seed, "proc", proc.pid))
        self.procs[proc.pid] = proc
        ctx = Context(self.now, proc)
        proc.on_start(ctx)
        self._commit(ctx)
        return proc

    def post(self, dst: str, msg: Any, at: int | None = None) -> None:
        """Inject a message from outside the simulation."""
        at = self.now if at is None else at
        if at < self.now:
            raise ValueError("cannot post into the past")
        self._push(at, dst, msg)

    def crash(self, pid: str, at: int) -> None:
        self.post(pid, Crash(), at)

    def recover(self, pid: str, at: int) -> None:
        self.post(pid, Recover(), at)

    def _push(self, at: int, dst: str, msg: Any) -> None:
        heapq.heappush(self._heap, (at, self._seq, dst, msg))
        self._seq += 1

    def _commit(self, ctx: Context) -> None:
        for at, dst, msg in ctx.outbox:
            self._push(at, dst, msg)
        self.trace.extend(ctx.records)

    def _handle(self, ctx: Context, msg: Any) -> None:
        proc = ctx.proc
        if isinstance(msg, Crash):
            proc.crashed = True
            ctx.log("crash")
            return
        if isinstance(msg, Recover):
            proc.crashed = False
            ctx.log("recover")
            proc.on_recover(ctx)
            return
        if proc.crashed:
            return
        proc.on_message(ctx, msg)

    def _run_group(self, items: list[tuple[int, Context, Any]]) -> None:
        for _, ctx, msg in items:
            self._handle(ctx, msg)

    def pending(self) -> int:
        return len(self._heap)

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None,
            max_events: int | None = None) -> None:
        """Advance until the queue drains, ``until`` is passed, or ``stop()``.

        ``stop`` is only consulted when virtual time is about to advance, so
        both execution modes stop at the same point.
        """
        if self.parallel and self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.workers)
        try:
            while self._heap:
                t = self._heap[0][0]
                if until is not None and t > until:
                    self.now = until
                    return
                if t > self.now:
                    if stop is not None and stop():
                        return
                    self.now = t
                if max_events is not None and self.events_processed >= max_events:
                    return
                if self.parallel:
                    self._step_parallel(t)
                else:
                    self._step_one()
        finally:
            if until is not None and not self._heap:
                self.now = max(self.now, until)

    def _step_one(self) -> None:
        at, _, dst, msg = heapq.heappop(self._heap)
        proc = self.procs.get(dst)
        if proc is None:
            self.dropped += 1
            return
        ctx = Context(at, proc)
        self._handle(ctx, msg)
        self._commit(ctx)
        self.events_processed += 1

    def _step_parallel(self, t: int) -> None:
        batch: list[tuple[int, Context, Any]] = []
        while self._heap and self._heap[0][0] == t:
            at, seq, dst, msg = heapq.heappop(self._heap)
            proc = self.procs.get(dst)
            if proc is None:
                self.dropped += 1
                continue
            batch.append((seq, Context(at, proc), msg))
        groups: dict[str, list[tuple[int, Context, Any]]] = {}
        for item in batch:
            groups.setdefault(item[1].proc.pid, []).append(item)
        if len(groups) > 1:
            list(self._pool.map(self._run_group, groups.values()))
        else:
            for g in groups.values():
                self._run_group(g)
        for _, ctx, _ in batch:
            self._commit(ctx)
        self.events_processed += len(batch)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
