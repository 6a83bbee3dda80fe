"""Relay-side channel bookkeeping: offline-tx validation and the flush rule.

Everything here is deterministic and free of scheduler concerns, so every
relay that executes the same ordered items reaches the same channel views.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from bcmon.records import OffchainTx, SignedPacket
from bcmon.transport import PacketKind


def should_flush(now: int, wakeup: int, timeout: int, qlen: int, buffer: int,
                 max_hold_ms: int | None = None, oldest: int | None = None) -> bool:
    """Both strict: more than ``timeout`` since the last flush and more than ``buffer`` queued.

    ``max_hold_ms`` (off by default) force-flushes a non-empty queue whose
    oldest entry has waited longer than that.
    """
    if now - wakeup > timeout and qlen > buffer:
        return True
    return (max_hold_ms is not None and qlen > 0 and oldest is not None
            and now - oldest > max_hold_ms)


class Violation(str, enum.Enum):
    BAD_SIGNATURE = "bad signature"
    BAD_NONCE = "bad nonce"
    INSUFFICIENT_BALANCE = "insufficient balance"
    UNKNOWN_KIND = "unknown kind"
    NO_CHANNEL = "no open channel"


@dataclass
class ChannelView:
    """A relay's picture of one client's channel."""

    client: str
    balances: dict[str, int]
    nonce: int = 0
    status: str = "open"  # open | closing

    def balance(self, account: str) -> int:
        return self.balances.get(account, 0)

    def apply(self, tx: OffchainTx) -> None:
        self.balances[tx.payer] = self.balance(tx.payer) - tx.amount
        self.balances[tx.payee] = self.balance(tx.payee) + tx.amount
        self.balances = {k: v for k, v in self.balances.items() if v}
        self.nonce = tx.nonce


def validate_offline_tx(view: ChannelView | None, packet: SignedPacket) -> Violation | None:
    """Signature, then nonce, then balance. ``None`` means the transfer is valid."""
    if packet.content.kind != PacketKind.OFF_CHAIN_PAY:
        return Violation.UNKNOWN_KIND
    if not packet.verify():
        return Violation.BAD_SIGNATURE
    if view is None or view.status != "open":
        return Violation.NO_CHANNEL
    if packet.content.nonce != view.nonce + 1:
        return Violation.BAD_NONCE
    if view.balance(packet.sender) < packet.content.amount:
        return Violation.INSUFFICIENT_BALANCE
    return None


@dataclass
class FlushWorker:
    """Batching worker: ``buffer``, ``timeout`` and the time of the last flush."""

    buffer: int
    timeout: int
    wakeup: int = 0
    max_hold_ms: int | None = None
    queue: list[tuple[int, OffchainTx]] = field(default_factory=list)

    def enqueue(self, now: int, tx: OffchainTx) -> None:
        self.queue.append((now, tx))

    def due(self, now: int, pending: int = 0) -> bool:
        qlen = len(self.queue) - pending
        oldest = self.queue[pending][0] if qlen > 0 else None
        return should_flush(now, self.wakeup, self.timeout, qlen, self.buffer, self.max_hold_ms, oldest)

    def take(self, now: int, count: int) -> list[OffchainTx]:
        batch = [tx for _, tx in self.queue[:count]]
        self.queue = self.queue[count:]
        if batch:
            self.wakeup = now
        return batch

    def remove_payer(self, payer: str) -> list[OffchainTx]:
        out = [tx for _, tx in self.queue if tx.payer == payer]
        self.queue = [(t, tx) for t, tx in self.queue if tx.payer != payer]
        return out
