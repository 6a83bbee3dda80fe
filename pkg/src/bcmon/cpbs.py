"""Deterministic analysis tasks over committed chain data.

A result payload is ``u8(status)`` followed, on success, by fixed-width
big-endian fields per data source in the task's declared source order:

* kind 1, account activity: ``tx_count, total_in, total_out, distinct_counterparties``
* kind 2, balance at height: ``balance`` after block ``window[1]``
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from bcmon.ccbs import EpochAgent, Tracked
from bcmon.chain import EventKind, ReadTransfers, Transfer, TransfersReply, TxReceipt
from bcmon.codec import Reader, u8, u64
from bcmon.committee import AckCode, PrepareMsg
from bcmon.records import (
    TAG_TASK_RESULT,
    TASK_ACCOUNT_ACTIVITY,
    TASK_BALANCE_AT_HEIGHT,
    ComputeTask,
    task_result_bytes,
)
from bcmon.sim import Context


class TaskStatus(enum.IntEnum):
    OK = 0
    WINDOW_BEYOND_HEIGHT = 1
    UNKNOWN_KIND = 2
    MISSING_SOURCE = 3


@dataclass(frozen=True)
class SourceData:
    """What a relay read from one chain: its height and the transfers it asked for."""

    height: int
    transfers: tuple[Transfer, ...]
    genesis: tuple[tuple[str, int], ...] = ()


def account_activity(transfers: Iterable[Transfer], account: str, lo: int, hi: int) -> tuple[int, int, int, int]:
    count = total_in = total_out = 0
    peers: set[str] = set()
    for t in transfers:
        if not lo <= t.height <= hi:
            continue
        if t.receiver != account and t.sender != account:
            continue
        count += 1
        if t.receiver == account:
            total_in += t.amount
            if t.sender != account:
                peers.add(t.sender)
        if t.sender == account:
            total_out += t.amount
            if t.receiver != account:
                peers.add(t.receiver)
    return count, total_in, total_out, len(peers)


def balance_at(genesis: Iterable[tuple[str, int]], transfers: Iterable[Transfer], account: str, hi: int) -> int:
    bal = dict(genesis).get(account, 0)
    for t in transfers:
        if t.height <= hi:
            if t.sender == account:
                bal -= t.amount
            if t.receiver == account:
                bal += t.amount
    return bal


def _activity(task: ComputeTask, data: SourceData) -> bytes:
    lo, hi = task.window
    return b"".join(u64(x) for x in account_activity(data.transfers, task.target_account, lo, hi))


def _balance(task: ComputeTask, data: SourceData) -> bytes:
    return u64(balance_at(data.genesis, data.transfers, task.target_account, task.window[1]))


TASK_CATALOG: dict[int, Callable[[ComputeTask, SourceData], bytes]] = {
    TASK_ACCOUNT_ACTIVITY: _activity,
    TASK_BALANCE_AT_HEIGHT: _balance,
}

FIELDS_PER_SOURCE = {TASK_ACCOUNT_ACTIVITY: 4, TASK_BALANCE_AT_HEIGHT: 1}


def read_range(task: ComputeTask) -> tuple[int, int]:
    """Block range a relay must fetch from each source."""
    lo, hi = task.window
    return (1, hi) if task.kind == TASK_BALANCE_AT_HEIGHT else (lo, hi)


def execute_task(task: ComputeTask, sources: dict[str, SourceData]) -> bytes:
    fn = TASK_CATALOG.get(task.kind)
    if fn is None:
        return u8(TaskStatus.UNKNOWN_KIND)
    if any(s not in sources for s in task.sources):
        return u8(TaskStatus.MISSING_SOURCE)
    if any(task.window[1] > sources[s].height for s in task.sources):
        return u8(TaskStatus.WINDOW_BEYOND_HEIGHT)
    return u8(TaskStatus.OK) + b"".join(fn(task, sources[s]) for s in task.sources)


def decode_payload(payload: bytes, kind: int) -> tuple[TaskStatus, list[int]]:
    r = Reader(payload)
    status = TaskStatus(r.u8())
    values = []
    while r.pos < len(r.data):
        values.append(r.u64())
    if status == TaskStatus.OK and values and kind in FIELDS_PER_SOURCE and len(values) % FIELDS_PER_SOURCE[kind]:
        raise ValueError("payload length does not match task kind")
    return status, values


def render_result(payload: bytes, kind: int) -> str:
    """Decimal fields joined by commas, or ``error,<status>``."""
    status, values = decode_payload(payload, kind)
    if status != TaskStatus.OK:
        return f"error,{int(status)}"
    return ",".join(str(v) for v in values)


def corrupt_payload(payload: bytes) -> bytes:
    """What a lying relay reports: a plausible status byte with shifted fields."""
    if len(payload) <= 1:
        return u8(TaskStatus.OK) + u64(1)
    return payload[:1] + bytes((b + 1) % 256 for b in payload[1:])


# rough wire size of one transfer record, used to charge scan time
TRANSFER_BYTES = 64


@dataclass
class TaskRun(Tracked):
    task: ComputeTask | None = None
    reads: dict[str, SourceData] = field(default_factory=dict)
    result: bytes | None = None


class CpbsAgent(EpochAgent):
    """Read, execute, attest and write back one compute task per Request event."""

    prefix = "cpbs"

    def __init__(self, node: Any):
        super().__init__(node)
        self.tasks: dict[str, TaskRun] = {}

    def on_event(self, ctx: Context, ev: Any) -> None:
        p = ev.payload
        if ev.kind == EventKind.REQUEST:
            task = ComputeTask.from_bytes(bytes.fromhex(p["task"]))
            if task.task_id in self.tasks:
                return
            st = TaskRun(task.task_id, ctx.now, task=task)
            self.tasks[task.task_id] = st
            self.active[task.task_id] = st
            if self.leads(st):
                ctx.log("cpbs_request", key=task.task_id, sources=len(task.sources))
            self._read(ctx, st)
            self.unpark(ctx, f"task:{task.task_id}")
        elif ev.kind == EventKind.CALLBACK:
            st = self.tasks.get(p["task_id"])
            if st is None or st.phase == "Done":
                return
            st.advance("Done")
            st.status = "Completed"
            self.active.pop(st.key, None)
            if self.leads(st):
                ctx.log("cpbs_done", key=st.key)
            uuid = self.node.task_uuid.get(st.key)
            if uuid is not None:
                self.node.finish(ctx, uuid, AckCode.OK, render_result(bytes.fromhex(p["payload"]), st.task.kind))

    def _read(self, ctx: Context, st: TaskRun) -> None:
        lo, hi = read_range(st.task)
        for src in st.task.sources:
            if src not in st.reads:
                ctx.send(self.node.chain_pid(src), ReadTransfers(self.node.pid, f"{st.key}|{src}", lo, hi),
                         self.node.cfg.rpc_ms)

    def on_reply(self, ctx: Context, rep: TransfersReply) -> None:
        task_id, src = rep.request_id.rsplit("|", 1)
        st = self.tasks.get(task_id)
        if st is None or st.result is not None or src in st.reads:
            return
        st.reads[src] = SourceData(rep.height, rep.transfers, rep.genesis)
        if all(s in st.reads for s in st.task.sources):
            self._execute(ctx, st)

    def _execute(self, ctx: Context, st: TaskRun) -> None:
        scanned = sum(len(d.transfers) for d in st.reads.values()) * TRANSFER_BYTES
        ctx.work(self.node.costs.scan_ms_per_kb * scanned / 1024)
        payload = execute_task(st.task, st.reads)
        if self.node.byzantine == "corrupt_task":
            payload = corrupt_payload(payload)
        st.result = task_result_bytes(st.key, payload)
        st.advance("Prepared")
        self.node.sign_topic(ctx, f"task:{st.key}", TAG_TASK_RESULT, st.result)

    def on_proof(self, ctx: Context, topic: str) -> None:
        st = self.tasks.get(topic.split(":", 1)[1])
        if st is None:
            return
        st.advance("Aggregated")
        if self.leads(st):
            ctx.log("cpbs_aggregated", key=st.key)
            self._submit(ctx, st)

    def _submit(self, ctx: Context, st: TaskRun) -> None:
        topic = f"task:{st.key}"
        _, agreed = self.node.collector.proof(topic)
        self.node.submit_tx(ctx, self.node.cfg.comp_chain, "comp", "task_callback",
                            {"result": agreed.hex(), "proof": self.node.proof_hex(topic)},
                            f"tcallback:{st.key}:{st.epoch}")
        st.advance("CallbackSubmitted")

    def on_receipt(self, ctx: Context, r: TxReceipt) -> None:
        if r.submitter == self.node.pid and not r.ok:
            ctx.log("cpbs_rejected", tag=r.tag, error=r.error)

    def respond(self, ctx: Context, msg: PrepareMsg) -> None:
        # a leader's nudge: re-send our signature, or retry the reads
        st = self.tasks.get(msg.topic.split(":", 1)[1])
        if st is None:
            self.park(msg)
        elif st.result is not None:
            self.node.sign_topic(ctx, msg.topic, TAG_TASK_RESULT, st.result)
        else:
            self._read(ctx, st)

    def redrive(self, ctx: Context, st: TaskRun) -> None:
        topic = f"task:{st.key}"
        if self.node.collector.proof(topic) is not None:
            self._submit(ctx, st)
        else:
            self.send_prepare(ctx, st, topic, b"")

    def on_stuck(self, ctx: Context, st: TaskRun) -> None:
        uuid = self.node.task_uuid.get(st.key)
        if uuid is not None:
            self.node.finish(ctx, uuid, AckCode.STUCK, "stuck")
