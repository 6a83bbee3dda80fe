"""Single-sequencer in-process blockchain.

Contracts are native Python handlers. A transaction runs against journaled
storage: if the handler raises :class:`ContractError` (or anything else),
every write it made, including native-token transfers and events, is rolled
back and the transaction is recorded as failed.
"""

from __future__ import annotations

import copy
import enum
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from bcmon.codec import canonical_json, sha256
from bcmon.sim import Context, Process

log = logging.getLogger(__name__)


class EventKind(str, enum.Enum):
    OPEN_CHANNEL = "OpenChannel"
    UPDATE_CHANNEL = "UpdateChannel"
    CLOSE_CHANNEL = "CloseChannel"
    REQUEST = "Request"
    ACCEPT = "Accept"
    CALLBACK = "Callback"


class ChainError(Exception):
    pass


class ContractError(Exception):
    """Raised by contract methods to abort the current transaction."""


@dataclass(frozen=True)
class ChainTransaction:
    submitter: str
    contract_id: str
    method: str
    args: dict
    nonce: int = 0
    tag: str = ""

    @property
    def tx_id(self) -> str:
        body = canonical_json([self.submitter, self.contract_id, self.method,
                               self.args, self.nonce, self.tag])
        return sha256(body.encode()).hex()


@dataclass(frozen=True)
class EventRecord:
    chain_id: str
    block_height: int
    contract_id: str
    kind: EventKind
    payload: dict
    event_seq: int
    tx_id: str = ""

    def to_json(self) -> dict:
        return {"chain": self.chain_id, "height": self.block_height, "contract": self.contract_id,
                "kind": self.kind.value, "payload": self.payload, "seq": self.event_seq,
                "tx": self.tx_id}


@dataclass(frozen=True)
class TxReceipt:
    tx_id: str
    chain_id: str
    block_height: int
    contract_id: str
    method: str
    submitter: str
    tag: str
    ok: bool
    error: str = ""
    result: Any = None

    def to_json(self) -> dict:
        return {"tx": self.tx_id, "chain": self.chain_id, "height": self.block_height,
                "contract": self.contract_id, "method": self.method, "submitter": self.submitter,
                "tag": self.tag, "ok": self.ok, "error": self.error}


@dataclass(frozen=True)
class Transfer:
    """A committed native-token movement, kept for on-chain data analysis."""

    height: int
    sender: str
    receiver: str
    amount: int


@dataclass
class Block:
    height: int
    timestamp: int
    txs: list[ChainTransaction] = field(default_factory=list)
    receipts: list[TxReceipt] = field(default_factory=list)
    events: list[EventRecord] = field(default_factory=list)
    transfers: list[Transfer] = field(default_factory=list)


ABSENT = object()


class _Journal:
    def __init__(self):
        self.undo: list[Callable[[], None]] = []
        self.events: list[tuple[str, EventKind, dict]] = []
        self.transfers: list[tuple[str, str, int]] = []


class Storage:
    """Per-contract key/value store. Reads return copies; writes are journaled."""

    def __init__(self, chain: "Chain"):
        self._data: dict[str, Any] = {}
        self._chain = chain

    def get(self, key: str, default: Any = None) -> Any:
        if key in self._data:
            return copy.deepcopy(self._data[key])
        return default

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def keys(self) -> list[str]:
        return sorted(self._data)

    def set(self, key: str, value: Any) -> None:
        self._chain._require_tx()
        old = self._data.get(key, ABSENT)
        self._chain._journal.undo.append(lambda: self._restore(key, old))
        self._data[key] = copy.deepcopy(value)

    def delete(self, key: str) -> None:
        self._chain._require_tx()
        if key not in self._data:
            return
        old = self._data[key]
        self._chain._journal.undo.append(lambda: self._restore(key, old))
        del self._data[key]

    def _restore(self, key: str, old: Any) -> None:
        if old is ABSENT:
            self._data.pop(key, None)
        else:
            self._data[key] = old

    def snapshot(self) -> dict:
        return copy.deepcopy(self._data)


class Contract:
    """Base for native contracts. Public methods are those listed in ``METHODS``."""

    METHODS: tuple[str, ...] = ()

    def __init__(self):
        self.chain: Chain | None = None
        self.contract_id = ""
        self.storage: Storage | None = None
        self.caller = ""
        self.height = 0

    def constructor(self, **kwargs: Any) -> None:
        pass

    def emit(self, kind: EventKind, payload: dict) -> None:
        self.chain._journal.events.append((self.contract_id, kind, payload))

    def transfer(self, sender: str, receiver: str, amount: int) -> None:
        self.chain._transfer(sender, receiver, amount)

    @property
    def address(self) -> str:
        return f"contract:{self.contract_id}"


class Subscription:
    def __init__(self, chain: "Chain", contract_id: str, kinds: Iterable[EventKind] | None):
        self.chain = chain
        self.contract_id = contract_id
        self.kinds = None if kinds is None else frozenset(EventKind(k) for k in kinds)
        self._cursor = 0

    def poll(self) -> list[EventRecord]:
        log_ = self.chain.event_log
        out = [e for e in log_[self._cursor:]
               if e.contract_id == self.contract_id and (self.kinds is None or e.kind in self.kinds)]
        self._cursor = len(log_)
        return out


class Chain:
    def __init__(self, chain_id: str, balances: dict[str, int] | None = None):
        self.chain_id = chain_id
        self.genesis_balances = dict(balances or {})
        self.balances: dict[str, int] = dict(self.genesis_balances)
        self.contracts: dict[str, Contract] = {}
        self.blocks: list[Block] = [Block(0, 0)]
        self.mempool: list[ChainTransaction] = []
        self.event_log: list[EventRecord] = []
        self.receipts: dict[str, TxReceipt] = {}
        self._journal: _Journal | None = None
        self._block_time = 0

    @property
    def height(self) -> int:
        return self.blocks[-1].height

    def _require_tx(self) -> None:
        if self._journal is None:
            raise ChainError("state may only change inside block production")

    def _transfer(self, sender: str, receiver: str, amount: int) -> None:
        self._require_tx()
        amount = int(amount)
        if amount < 0:
            raise ContractError("negative transfer")
        have = self.balances.get(sender, 0)
        if have < amount:
            raise ContractError(f"insufficient native balance: {sender} has {have}, needs {amount}")
        prev_s, prev_r = self.balances.get(sender, ABSENT), self.balances.get(receiver, ABSENT)

        def undo():
            for acct, prev in ((receiver, prev_r), (sender, prev_s)):
                if prev is ABSENT:
                    self.balances.pop(acct, None)
                else:
                    self.balances[acct] = prev
        self._journal.undo.append(undo)
        self.balances[sender] = have - amount
        self.balances[receiver] = self.balances.get(receiver, 0) + amount
        self._journal.transfers.append((sender, receiver, amount))

    def deploy_contract(self, contract_id: str, contract: Contract, **constructor_args: Any) -> str:
        if contract_id in self.contracts:
            raise ChainError(f"contract {contract_id!r} already deployed on {self.chain_id}")
        contract.chain = self
        contract.contract_id = contract_id
        contract.storage = Storage(self)
        self._journal = _Journal()
        try:
            contract.constructor(**constructor_args)
        finally:
            self._journal = None
        self.contracts[contract_id] = contract
        return contract_id

    def submit_tx(self, tx: ChainTransaction) -> str:
        self.mempool.append(tx)
        return tx.tx_id

    def produce_block(self, timestamp: int | None = None) -> Block:
        height = self.height + 1
        self._block_time = self._block_time if timestamp is None else timestamp
        block = Block(height, self._block_time)
        pending, self.mempool = self.mempool, []
        for tx in pending:
            receipt, events, transfers = self._execute(tx, height)
            block.txs.append(tx)
            block.receipts.append(receipt)
            self.receipts[tx.tx_id] = receipt
            for contract_id, kind, payload in events:
                ev = EventRecord(self.chain_id, height, contract_id, kind, payload,
                                 len(self.event_log), tx.tx_id)
                self.event_log.append(ev)
                block.events.append(ev)
            block.transfers.extend(Transfer(height, s, r, a) for s, r, a in transfers)
        self.blocks.append(block)
        return block

    def _execute(self, tx: ChainTransaction, height: int):
        contract = self.contracts.get(tx.contract_id)

        def failed(err: str):
            return TxReceipt(tx.tx_id, self.chain_id, height, tx.contract_id, tx.method,
                             tx.submitter, tx.tag, False, err), [], []

        if contract is None:
            return failed("unknown contract")
        if tx.method not in contract.METHODS:
            return failed(f"unknown method {tx.method}")
        self._journal = _Journal()
        contract.caller = tx.submitter
        contract.height = height
        try:
            result = getattr(contract, tx.method)(**tx.args)
        except Exception as exc:  # any handler failure aborts only this tx
            for undo in reversed(self._journal.undo):
                undo()
            self._journal = None
            err = str(exc) if isinstance(exc, ContractError) else f"{type(exc).__name__}: {exc}"
            return failed(err)
        journal, self._journal = self._journal, None
        receipt = TxReceipt(tx.tx_id, self.chain_id, height, tx.contract_id, tx.method,
                            tx.submitter, tx.tag, True, "", result)
        return receipt, journal.events, journal.transfers

    def subscribe(self, contract_id: str, kinds: Iterable[EventKind | str] | None = None) -> Subscription:
        if contract_id not in self.contracts:
            raise ChainError(f"no contract {contract_id!r} on {self.chain_id}")
        if isinstance(kinds, (str, EventKind)):
            kinds = [kinds]
        return Subscription(self, contract_id, kinds)

    def query_state(self, contract_id: str, key: str, default: Any = ABSENT) -> Any:
        if contract_id not in self.contracts:
            raise ChainError(f"no contract {contract_id!r} on {self.chain_id}")
        return self.contracts[contract_id].storage.get(key, default)

    def balance_of(self, account: str) -> int:
        return self.balances.get(account, 0)

    def transfers_between(self, lo: int, hi: int) -> list[Transfer]:
        return [t for b in self.blocks[lo:hi + 1] for t in b.transfers]

    def state_root(self) -> str:
        state = {
            "balances": {k: v for k, v in sorted(self.balances.items()) if v},
            "contracts": {cid: c.storage.snapshot() for cid, c in sorted(self.contracts.items())},
        }
        return sha256(canonical_json(state).encode()).hex()

    def dump_lines(self) -> list[str]:
        """Line-delimited records: one per block, one per event, final state root."""
        lines = []
        for b in self.blocks[1:]:
            lines.append(canonical_json({"type": "block", "chain": self.chain_id, "height": b.height,
                                         "t": b.timestamp, "txs": [r.to_json() for r in b.receipts]}))
        for ev in self.event_log:
            lines.append(canonical_json({"type": "event", **ev.to_json()}))
        lines.append(canonical_json({"type": "state_root", "chain": self.chain_id,
                                     "height": self.height, "root": self.state_root()}))
        return lines


# --- scheduler wrapper ------------------------------------------------------

@dataclass(frozen=True)
class SubmitTx:
    tx: ChainTransaction


@dataclass(frozen=True)
class Subscribe:
    subscriber: str
    contract_id: str


@dataclass(frozen=True)
class ChainEvent:
    event: EventRecord


@dataclass(frozen=True)
class ChainReceipt:
    receipt: TxReceipt


@dataclass(frozen=True)
class ReadTransfers:
    """Ask for committed transfers in ``[lo, hi]``; answered with ``TransfersReply``."""

    requester: str
    request_id: str
    lo: int
    hi: int


@dataclass(frozen=True)
class TransfersReply:
    chain_id: str
    request_id: str
    height: int
    lo: int
    hi: int
    transfers: tuple[Transfer, ...]
    genesis: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class _BlockTick:
    pass


class ChainNode(Process):
    """Drives a :class:`Chain` from the scheduler.

    Produces a block every ``block_interval_ms``; after each block, pushes
    events and receipts of subscribed contracts to subscribers after
    ``rpc_ms``.
    """

    def __init__(self, chain: Chain, block_interval_ms: int = 1000, rpc_ms: int = 5):
        super().__init__(f"chain:{chain.chain_id}")
        self.chain = chain
        self.block_interval_ms = block_interval_ms
        self.rpc_ms = rpc_ms
        self.subscribers: dict[str, list[str]] = {}

    def on_start(self, ctx: Context) -> None:
        ctx.timer(self.block_interval_ms, _BlockTick())

    def on_message(self, ctx: Context, msg: Any) -> None:
        if isinstance(msg, SubmitTx):
            self.chain.submit_tx(msg.tx)
        elif isinstance(msg, _BlockTick):
            self._produce(ctx)
            ctx.timer(self.block_interval_ms, _BlockTick())
        elif isinstance(msg, Subscribe):
            subs = self.subscribers.setdefault(msg.contract_id, [])
            if msg.subscriber not in subs:
                subs.append(msg.subscriber)
        elif isinstance(msg, ReadTransfers):
            hi = min(msg.hi, self.chain.height)
            reply = TransfersReply(self.chain.chain_id, msg.request_id, self.chain.height, msg.lo,
                                   msg.hi, tuple(self.chain.transfers_between(msg.lo, hi)),
                                   tuple(sorted(self.chain.genesis_balances.items())))
            ctx.send(msg.requester, reply, self.rpc_ms)

    def _produce(self, ctx: Context) -> None:
        block = self.chain.produce_block(ctx.now)
        if block.txs:
            ctx.log("block", chain=self.chain.chain_id, height=block.height, ntx=len(block.txs),
                    failed=sum(not r.ok for r in block.receipts))
        by_tx: dict[str, list[EventRecord]] = {}
        for ev in block.events:
            by_tx.setdefault(ev.tx_id, []).append(ev)
        for r in block.receipts:
            for sub in self.subscribers.get(r.contract_id, ()):
                ctx.send(sub, ChainReceipt(r), self.rpc_ms)
            for ev in by_tx.pop(r.tx_id, ()):
                for sub in self.subscribers.get(ev.contract_id, ()):
                    ctx.send(sub, ChainEvent(ev), self.rpc_ms)
