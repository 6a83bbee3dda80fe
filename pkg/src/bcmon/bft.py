"""PBFT ordering among relay nodes.

A :class:`PbftReplica` is not a process itself: a host process owns it and
forwards the messages defined here, so the same replica runs inside relay
nodes and inside the stand-alone :func:`bft_round` test rig.

Three phases per slot: the view leader sends PRE-PREPARE, every replica
sends PREPARE, and once a replica holds a quorum of matching prepares it
sends COMMIT; a quorum of commits commits the slot. Slots execute in
sequence order and each request key executes at most once.

View change: a replica that sees no execution progress for ``vc_timeout_ms``
while requests are pending broadcasts VIEW-CHANGE carrying every prepared
certificate it holds. The next leader collects a quorum of them and sends
NEW-VIEW with the slots to re-run; receivers recompute that set from the
enclosed view changes before accepting it. A replica joins a view change once
``f + 1`` peers ask for a higher view, and escalates to the following view
if the new leader stays silent.

Messages are assumed authenticated by the transport (the simulator never
forges a sender), so quorums are counted over distinct sender indices.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from bcmon.codec import canonical_json, sha256
from bcmon.sim import Context, Process, Scheduler

log = logging.getLogger(__name__)


def max_faults(n: int) -> int:
    return (n - 1) // 3


def quorum_size(n: int, f: int | None = None) -> int:
    """Smallest quorum whose pairwise intersections hold an honest node.

    ``ceil((n + f + 1) / 2)``, which is ``2f + 1`` when ``n = 3f + 1``.
    """
    f = max_faults(n) if f is None else f
    if n < 3 * f + 1:
        raise ValueError(f"n={n} cannot tolerate f={f}")
    return (n + f + 2) // 2


def elect_leader(committee: Sequence[Any], epoch: int) -> Any:
    if not committee:
        raise ValueError("empty committee")
    return committee[epoch % len(committee)]


def item_digest(key: str | None, item: Any) -> bytes:
    return sha256(canonical_json([key, item]).encode())


# --- messages ----------------------------------------------------------------

@dataclass(frozen=True)
class BftRequest:
    key: str
    item: Any


@dataclass(frozen=True)
class PrePrepare:
    view: int
    seq: int
    key: str | None
    item: Any = field(compare=False)
    digest: bytes
    src: int


@dataclass(frozen=True)
class Prepare:
    view: int
    seq: int
    digest: bytes
    src: int


@dataclass(frozen=True)
class Commit:
    view: int
    seq: int
    digest: bytes
    src: int


@dataclass(frozen=True)
class Cert:
    """A prepared slot: ``(seq, view, key, item, digest)``."""

    seq: int
    view: int
    key: str | None
    item: Any = field(compare=False)
    digest: bytes


@dataclass(frozen=True)
class ViewChange:
    new_view: int
    src: int
    exec_next: int
    certs: tuple[Cert, ...]


@dataclass(frozen=True)
class NewView:
    view: int
    src: int
    view_changes: tuple[ViewChange, ...]
    slots: tuple[Cert, ...]


@dataclass(frozen=True)
class _Expire:
    token: int


BFT_MESSAGES = (BftRequest, PrePrepare, Prepare, Commit, ViewChange, NewView, _Expire)


def new_view_slots(vcs: Sequence[ViewChange], view: int) -> tuple[Cert, ...]:
    """Slots a new leader must re-run: highest-view certificate per seq, gaps as no-ops."""
    low = min(vc.exec_next for vc in vcs)
    best: dict[int, Cert] = {}
    for vc in vcs:
        for c in vc.certs:
            if c.seq >= low and (c.seq not in best or c.view > best[c.seq].view):
                best[c.seq] = c
    top = max(best, default=low - 1)
    out = []
    for s in range(low, top + 1):
        c = best.get(s)
        if c is None:
            out.append(Cert(s, view, None, None, item_digest(None, None)))
        else:
            out.append(Cert(s, view, c.key, c.item, c.digest))
    return tuple(out)


@dataclass
class _Slot:
    key: str | None
    item: Any
    digest: bytes
    prepared: bool = False
    committed: bool = False


class PbftReplica:
    """Protocol state of one replica.

    ``deliver(ctx, seq, key, item)`` is called once per executed request, in
    sequence order. ``ready(item)`` may hold back a PRE-PREPARE until the host
    can validate it (for example, until it has seen the chain event the item
    refers to); the host calls :meth:`retry_parked` when that changes.
    """

    def __init__(self, idx: int, peers: Sequence[str], f: int | None = None, *,
                 deliver: Callable[[Context, int, str, Any], None],
                 ready: Callable[[Any], bool] | None = None,
                 vc_timeout_ms: int = 500,
                 delay: Callable[[Context, int], int] | None = None,
                 on_view: Callable[[Context, int], None] | None = None):
        self.idx = idx
        self.peers = list(peers)
        self.n = len(self.peers)
        self.f = max_faults(self.n) if f is None else f
        self.q = quorum_size(self.n, self.f)
        self.deliver = deliver
        self.ready = ready or (lambda item: True)
        self.vc_timeout_ms = vc_timeout_ms
        self.delay = delay or (lambda ctx, dst: 0 if dst == self.idx else 1)
        self.on_view = on_view

        self.view = 0
        self.in_vc = False
        self.vc_target = 0
        self.next_seq = 1
        self.slots: dict[tuple[int, int], _Slot] = {}
        self.prepares: dict[tuple[int, int, bytes], set[int]] = {}
        self.commits: dict[tuple[int, int, bytes], set[int]] = {}
        self.certs: dict[int, Cert] = {}
        self.committed: dict[int, tuple[str | None, Any]] = {}
        self.exec_next = 1
        self.executed: set[str] = set()
        self.log: list[tuple[int, str, Any]] = []
        self.pending: dict[str, Any] = {}
        self.assigned: set[str] = set()
        self.parked: list[PrePrepare] = []
        self.vc_msgs: dict[int, dict[int, ViewChange]] = {}
        self.nv_sent: set[int] = set()
        self.conflicts: list[int] = []
        self.future: list[Any] = []
        self._progress = 0
        self._mark = 0
        self._timer_armed = False
        self._token = 0

    # helpers ----------------------------------------------------------------

    def leader_of(self, view: int) -> int:
        return elect_leader(range(self.n), view)

    @property
    def is_leader(self) -> bool:
        return not self.in_vc and self.leader_of(self.view) == self.idx

    def _broadcast(self, ctx: Context, msg: Any) -> None:
        for j, pid in enumerate(self.peers):
            ctx.send(pid, msg, self.delay(ctx, j))

    def _arm(self, ctx: Context, scale: int = 1) -> None:
        self._token += 1
        self._timer_armed = True
        self._mark = self._progress
        ctx.timer(self.vc_timeout_ms * scale, _Expire(self._token))

    # entry points -----------------------------------------------------------

    def submit(self, ctx: Context, key: str, item: Any) -> None:
        """Make a request known to every replica (client-side broadcast)."""
        self._broadcast(ctx, BftRequest(key, item))

    def handle(self, ctx: Context, msg: Any) -> None:
        if isinstance(msg, BftRequest):
            self._on_request(ctx, msg.key, msg.item)
        elif isinstance(msg, (PrePrepare, Prepare, Commit)) and msg.view > self.view:
            self.future.append(msg)  # sent in a view we have not installed yet
        elif isinstance(msg, PrePrepare):
            self._on_preprepare(ctx, msg)
        elif isinstance(msg, Prepare):
            if msg.view == self.view and not self.in_vc:
                self.prepares.setdefault((msg.view, msg.seq, msg.digest), set()).add(msg.src)
                self._check(ctx, msg.view, msg.seq)
        elif isinstance(msg, Commit):
            if msg.view == self.view and not self.in_vc:
                self.commits.setdefault((msg.view, msg.seq, msg.digest), set()).add(msg.src)
                self._check(ctx, msg.view, msg.seq)
        elif isinstance(msg, ViewChange):
            self._on_view_change(ctx, msg)
        elif isinstance(msg, NewView):
            self._on_new_view(ctx, msg)
        elif isinstance(msg, _Expire):
            self._on_expire(ctx, msg)

    def rearm(self, ctx: Context) -> None:
        """Restart the progress timer, e.g. after the host lost its timers in a crash."""
        self._timer_armed = False
        if self.pending or self.in_vc:
            self._arm(ctx)

    def retry_parked(self, ctx: Context) -> None:
        parked, self.parked = self.parked, []
        for pp in parked:
            self._on_preprepare(ctx, pp)

    # normal case ------------------------------------------------------------

    def _on_request(self, ctx: Context, key: str, item: Any) -> None:
        if key in self.executed:
            return
        if key not in self.pending:
            self.pending[key] = item
        if not self._timer_armed:
            self._arm(ctx)
        if self.is_leader and key not in self.assigned:
            self._propose(ctx, key, item)

    def _propose(self, ctx: Context, key: str | None, item: Any) -> None:
        seq = self.next_seq
        self.next_seq += 1
        if key is not None:
            self.assigned.add(key)
        ctx.log("bft_propose", view=self.view, seq=seq, key=key)
        self._broadcast(ctx, PrePrepare(self.view, seq, key, item, item_digest(key, item), self.idx))

    def _on_preprepare(self, ctx: Context, pp: PrePrepare) -> None:
        if pp.view != self.view or self.in_vc or pp.src != self.leader_of(pp.view):
            return
        if item_digest(pp.key, pp.item) != pp.digest:
            return
        slot = self.slots.get((pp.view, pp.seq))
        if slot is not None:
            return  # first pre-prepare for a slot wins; a second one is equivocation
        if not self.ready(pp.item):
            self.parked.append(pp)
            return
        self.slots[(pp.view, pp.seq)] = _Slot(pp.key, pp.item, pp.digest)
        if pp.key is not None:
            self.assigned.add(pp.key)
            if pp.key not in self.executed:
                self.pending.setdefault(pp.key, pp.item)
        self._broadcast(ctx, Prepare(pp.view, pp.seq, pp.digest, self.idx))
        self._check(ctx, pp.view, pp.seq)

    def _check(self, ctx: Context, view: int, seq: int) -> None:
        slot = self.slots.get((view, seq))
        if slot is None:
            return
        k = (view, seq, slot.digest)
        if not slot.prepared and len(self.prepares.get(k, ())) >= self.q:
            slot.prepared = True
            old = self.certs.get(seq)
            if old is None or old.view <= view:
                self.certs[seq] = Cert(seq, view, slot.key, slot.item, slot.digest)
            self._broadcast(ctx, Commit(view, seq, slot.digest, self.idx))
        if slot.prepared and not slot.committed and len(self.commits.get(k, ())) >= self.q:
            slot.committed = True
            prev = self.committed.get(seq)
            if prev is None:
                self.committed[seq] = (slot.key, slot.item)
            elif item_digest(*prev) != slot.digest:
                self.conflicts.append(seq)
            self._execute(ctx)

    def _execute(self, ctx: Context) -> None:
        while self.exec_next in self.committed:
            seq = self.exec_next
            key, item = self.committed[seq]
            self.exec_next += 1
            self._progress += 1
            if key is None or key in self.executed:
                continue
            self.executed.add(key)
            self.pending.pop(key, None)
            self.log.append((seq, key, item))
            self.deliver(ctx, seq, key, item)

    # view change ------------------------------------------------------------

    def _on_expire(self, ctx: Context, msg: _Expire) -> None:
        if msg.token != self._token:
            return
        self._timer_armed = False
        if self.in_vc:
            self.start_view_change(ctx, self.vc_target + 1)
        elif self.pending and self._progress == self._mark:
            self.start_view_change(ctx, self.view + 1)
        elif self.pending:
            self._arm(ctx)

    def suspect_leader(self, ctx: Context) -> None:
        """Host-level evidence that the leader is not doing its job."""
        if not self.in_vc:
            self.start_view_change(ctx, self.view + 1)

    def start_view_change(self, ctx: Context, new_view: int) -> None:
        current = self.vc_target if self.in_vc else self.view
        if new_view <= current:
            return
        self.in_vc = True
        self.vc_target = new_view
        ctx.log("bft_view_change", frm=self.view, to=new_view)
        certs = tuple(self.certs[s] for s in sorted(self.certs))
        self._broadcast(ctx, ViewChange(new_view, self.idx, self.exec_next, certs))
        self._arm(ctx, scale=new_view - self.view + 1)

    def _on_view_change(self, ctx: Context, vc: ViewChange) -> None:
        if vc.new_view <= self.view:
            return
        self.vc_msgs.setdefault(vc.new_view, {})[vc.src] = vc
        current = self.vc_target if self.in_vc else self.view
        higher = {}
        for v, msgs in self.vc_msgs.items():
            if v > current:
                for src in msgs:
                    higher.setdefault(src, v)
                    higher[src] = min(higher[src], v)
        if len(higher) >= self.f + 1:
            self.start_view_change(ctx, min(higher.values()))
        nv = vc.new_view
        msgs = self.vc_msgs.get(nv, {})
        if (self.leader_of(nv) == self.idx and len(msgs) >= self.q and nv not in self.nv_sent
                and self.in_vc and self.vc_target == nv):
            self.nv_sent.add(nv)
            chosen = tuple(msgs[s] for s in sorted(msgs)[:self.q])
            slots = new_view_slots(chosen, nv)
            self._broadcast(ctx, NewView(nv, self.idx, chosen, slots))

    def _on_new_view(self, ctx: Context, nv: NewView) -> None:
        if nv.view < self.view or (nv.view == self.view and not self.in_vc):
            return
        if nv.src != self.leader_of(nv.view):
            return
        srcs = {vc.src for vc in nv.view_changes}
        if len(srcs) < self.q or any(vc.new_view != nv.view for vc in nv.view_changes):
            return
        expected = new_view_slots(nv.view_changes, nv.view)
        if [(c.seq, c.key, c.digest) for c in expected] != [(c.seq, c.key, c.digest) for c in nv.slots]:
            return
        self.view = nv.view
        self.in_vc = False
        self.vc_target = nv.view
        self.assigned = set()
        self.parked = []
        for k in [k for k in self.prepares if k[0] < self.view]:
            del self.prepares[k]
        for k in [k for k in self.commits if k[0] < self.view]:
            del self.commits[k]
        for k in [k for k in self.slots if k[0] < self.view]:
            del self.slots[k]
        ctx.log("bft_new_view", view=self.view, leader=nv.src, slots=len(nv.slots))
        if self.on_view is not None:
            self.on_view(ctx, self.view)
        top = max((c.seq for c in nv.slots), default=0)
        low = min((vc.exec_next for vc in nv.view_changes), default=1)
        for c in nv.slots:
            self._on_preprepare(ctx, PrePrepare(self.view, c.seq, c.key, c.item, c.digest, nv.src))
        self._timer_armed = False
        if self.pending:
            self._arm(ctx)
        if self.leader_of(self.view) == self.idx:
            self.next_seq = max(top + 1, low)
            for key, item in list(self.pending.items()):
                if key not in self.assigned and key not in self.executed:
                    self._propose(ctx, key, item)
        early, self.future = self.future, []
        for msg in early:
            self.handle(ctx, msg)


# --- stand-alone rig ---------------------------------------------------------

class _BftHost(Process):
    def __init__(self, pid: str, idx: int, peers: list[str], f: int, *, vc_timeout_ms: int,
                 link_ms: tuple[int, int], byzantine: str | None = None):
        super().__init__(pid)
        lo, hi = link_ms
        self.byzantine = byzantine
        self.replica = PbftReplica(
            idx, peers, f, deliver=self._deliver, vc_timeout_ms=vc_timeout_ms,
            delay=lambda ctx, dst: 0 if dst == idx else ctx.rng.randint(lo, hi))

    def _deliver(self, ctx: Context, seq: int, key: str, item: Any) -> None:
        ctx.log("bft_commit", seq=seq, key=key, replica=self.replica.idx)

    def on_message(self, ctx: Context, msg: Any) -> None:
        if self.byzantine == "silent" and not isinstance(msg, _Expire):
            return
        self.replica.handle(ctx, msg)


@dataclass
class BftRoundResult:
    n: int
    f: int
    logs: dict[int, list[tuple[int, str, Any]]]
    views: dict[int, int]
    faulty: set[int]
    proposals: list[tuple[str, Any]]
    conflicts: dict[int, list[int]]
    trace: list[dict]

    @property
    def correct(self) -> list[int]:
        return [i for i in range(self.n) if i not in self.faulty]

    def agreement(self) -> bool:
        """Every pair of correct replicas executed the same key at every shared seq."""
        by_seq: dict[int, str] = {}
        for i in self.correct:
            for seq, key, _ in self.logs[i]:
                if by_seq.setdefault(seq, key) != key:
                    return False
        return not any(self.conflicts[i] for i in self.correct)

    def validity(self) -> bool:
        proposed = dict(self.proposals)
        return all(key in proposed and item == proposed[key]
                   for i in self.correct for _, key, item in self.logs[i])

    def live(self) -> bool:
        want = {k for k, _ in self.proposals}
        return all({k for _, k, _ in self.logs[i]} == want for i in self.correct)

    def max_view(self) -> int:
        return max((self.views[i] for i in self.correct), default=0)

    def committed(self) -> bool:
        return self.live()


def bft_round(n: int, proposals: Sequence[tuple[str, Any]] | Any, *, f: int | None = None,
              crash: dict[int, int] | None = None, silent: Sequence[int] = (),
              seed: int = 0, link_ms: tuple[int, int] = (1, 1), vc_timeout_ms: int = 200,
              horizon_ms: int = 60_000, parallel: bool = False) -> BftRoundResult:
    """Run one committee until every proposal executes or ``horizon_ms`` passes.

    ``proposals`` are ``(key, item)`` pairs broadcast to all replicas at t=0.
    ``crash`` maps replica index to crash time; ``silent`` replicas drop
    everything from the start.
    """
    if not isinstance(proposals, (list, tuple)) or (proposals and not isinstance(proposals[0], tuple)):
        proposals = [("p0", proposals)]
    proposals = list(proposals)
    f = max_faults(n) if f is None else f
    crash = dict(crash or {})
    sched = Scheduler(seed, parallel=parallel)
    peers = [f"r{i}" for i in range(n)]
    hosts = []
    for i in range(n):
        h = _BftHost(peers[i], i, peers, f, vc_timeout_ms=vc_timeout_ms, link_ms=link_ms,
                     byzantine="silent" if i in silent else None)
        hosts.append(sched.add(h))
    for i, t in crash.items():
        sched.crash(peers[i], t)
    for key, item in proposals:
        for pid in peers:
            sched.post(pid, BftRequest(key, item))
    want = {k for k, _ in proposals}
    faulty = set(crash) | set(silent)

    def done() -> bool:
        return all({k for _, k, _ in hosts[i].replica.log} >= want for i in range(n) if i not in faulty)

    try:
        sched.run(until=horizon_ms, stop=done)
    finally:
        sched.close()
    return BftRoundResult(
        n, f, {i: list(h.replica.log) for i, h in enumerate(hosts)},
        {i: h.replica.view for i, h in enumerate(hosts)}, faulty, proposals,
        {i: list(h.replica.conflicts) for i, h in enumerate(hosts)}, sched.trace)


def random_crash_schedule(rng: random.Random, n: int, f: int, horizon_ms: int = 400) -> dict[int, int]:
    """Crash ``f`` distinct replicas at random times (leader included with some probability)."""
    victims = rng.sample(range(n), f)
    return {v: rng.randint(0, horizon_ms) for v in victims}
