"""On-chain protocol fixtures: payment channels, cross-chain proxies, compute tasks.

Arguments that carry signed bytes are passed hex-encoded so transactions stay
JSON-serialisable (their ids are hashes of canonical JSON).
"""

from __future__ import annotations

from typing import Callable

from bcmon.chain import Contract, ContractError, EventKind
from bcmon.crypto.bls import AggregateRegistry, AggregationError, decode_proof, verify_aggregate_same_message
from bcmon.records import (
    TAG_CLOSE,
    TAG_REQUEST,
    TAG_RESULT,
    TAG_TASK_RESULT,
    TASK_ACCOUNT_ACTIVITY,
    TASK_BALANCE_AT_HEIGHT,
    CrossChainRequest,
    OffchainTx,
    SignedPacket,
    TAG_UPDATE,
    attest_message,
    close_digest_payload,
    decode_result,
    request_from_packet,
    split_task_result,
    task_from_packet,
    task_result_bytes,
    update_digest_payload,
)
from bcmon.transport import PacketKind


def _unhex(value: str, what: str) -> bytes:
    try:
        return bytes.fromhex(value)
    except (TypeError, ValueError):
        raise ContractError(f"malformed {what}") from None


class _Attested(Contract):
    """Holds the committee registry written at deployment."""

    def constructor(self, registry: AggregateRegistry, quorum: int, **kwargs) -> None:
        if not 1 <= quorum <= registry.n:
            raise ContractError("quorum must lie in [1, n]")
        self.registry = registry
        self.quorum = quorum
        # the registry is immutable; keep the keys readable from storage too
        self.storage.set("apub", [registry.group.g1_to_bytes(k).hex() for k in registry.apub])
        self.storage.set("quorum", quorum)

    def check_proof(self, proof_hex: str, tag: bytes, payload: bytes) -> None:
        try:
            proof = decode_proof(_unhex(proof_hex, "proof"), self.registry.group)
            ok = verify_aggregate_same_message(proof, self.registry, attest_message(tag, payload),
                                               self.quorum)
        except (ValueError, AggregationError) as exc:
            raise ContractError(f"bad attestation: {exc}") from None
        if not ok:
            raise ContractError("attestation does not verify")


# --- channels ----------------------------------------------------------------

def net_balances(balances: dict[str, int], txs: list[OffchainTx]) -> dict[str, int]:
    out = dict(balances)
    for tx in txs:
        out[tx.payer] = out.get(tx.payer, 0) - tx.amount
        out[tx.payee] = out.get(tx.payee, 0) + tx.amount
    return {k: v for k, v in out.items() if v}


class ChannelContract(_Attested):
    """Escrow for offline clients; one channel per (client, relay committee).

    Storage per channel (key ``ch:<client>``)::

        {client, relay, balances, txs, nonce, update_count}

    ``balances`` is the settled map, ``txs`` the applied but not yet netted
    transfers (hex). The channel's current view is ``balances`` plus ``txs``.
    """

    METHODS = ("open_channel", "update_channel", "close_channel")

    def constructor(self, registry: AggregateRegistry, quorum: int, threshold: int = 1, **kw) -> None:
        super().constructor(registry, quorum)
        if threshold < 1:
            raise ContractError("threshold must be >= 1")
        self.storage.set("threshold", threshold)

    # views ----------------------------------------------------------------

    def channel(self, client: str) -> dict | None:
        return self.storage.get(f"ch:{client}")

    @staticmethod
    def view(record: dict) -> dict[str, int]:
        txs = [OffchainTx.from_bytes(bytes.fromhex(h)) for h in record["txs"]]
        return net_balances(record["balances"], txs)

    # methods --------------------------------------------------------------

    def open_channel(self, relay: str, packet: str) -> dict:
        pkt = SignedPacket.from_bytes(_unhex(packet, "packet"))
        if pkt.content.kind != PacketKind.OPEN_CHANNEL:
            raise ContractError("not an open request")
        if not pkt.verify():
            raise ContractError("bad client signature")
        client = pkt.sender
        gen = self.storage.get(f"gen:{client}", 0)
        if pkt.content.nonce != gen + 1:
            raise ContractError("stale open request")
        if f"ch:{client}" in self.storage:
            raise ContractError("channel already open")
        amount = pkt.content.amount
        if amount <= 0:
            raise ContractError("escrow must be positive")
        self.transfer(client, self.address, amount)
        self.storage.set(f"gen:{client}", gen + 1)
        self.storage.set(f"ch:{client}", {"client": client, "relay": relay, "balances": {client: amount},
                                          "txs": [], "nonce": 0, "update_count": 0})
        self.emit(EventKind.OPEN_CHANNEL, {"client": client, "relay": relay, "balance": amount,
                                           "generation": gen + 1})
        return {"client": client, "balance": amount}

    def _apply(self, relay: str, txs: list[OffchainTx]) -> dict[str, dict]:
        """Validate and append ``txs``; returns touched records (not yet stored)."""
        touched: dict[str, dict] = {}
        views: dict[str, dict[str, int]] = {}
        for tx in txs:
            rec = touched.get(tx.payer) or self.channel(tx.payer)
            if rec is None or rec["relay"] != relay:
                raise ContractError(f"no channel for payer {tx.payer}")
            if not tx.packet.verify():
                raise ContractError("bad client signature in batch")
            if tx.nonce != rec["nonce"] + 1:
                raise ContractError(f"bad nonce {tx.nonce} for {tx.payer}, expected {rec['nonce'] + 1}")
            view = views.get(tx.payer) or self.view(rec)
            if view.get(tx.payer, 0) < tx.amount:
                raise ContractError(f"insufficient escrow for {tx.payer}")
            view[tx.payer] = view.get(tx.payer, 0) - tx.amount
            view[tx.payee] = view.get(tx.payee, 0) + tx.amount
            views[tx.payer] = view
            rec["txs"].append(tx.to_bytes().hex())
            rec["nonce"] = tx.nonce
            touched[tx.payer] = rec
        return touched

    def _aggregate(self, rec: dict) -> None:
        txs = [OffchainTx.from_bytes(bytes.fromhex(h)) for h in rec["txs"]]
        rec["balances"] = net_balances(rec["balances"], txs)
        rec["txs"] = []
        rec["update_count"] = 0

    def update_channel(self, relay: str, batch: list[str], batch_seq: int, proof: str) -> dict:
        txs = [OffchainTx.from_bytes(_unhex(h, "tx")) for h in batch]
        last = self.storage.get(f"seq:{relay}", 0)
        if batch_seq <= last:
            raise ContractError(f"stale batch {batch_seq}")
        if batch_seq != last + 1:
            raise ContractError(f"batch gap: got {batch_seq}, expected {last + 1}")
        payload = update_digest_payload(self.chain.chain_id, self.contract_id, relay, batch_seq, txs)
        self.check_proof(proof, TAG_UPDATE, payload)
        threshold = self.storage.get("threshold")
        touched = self._apply(relay, txs)
        for client in sorted(touched):
            rec = touched[client]
            rec["update_count"] += 1
            if rec["update_count"] == threshold:
                self._aggregate(rec)
                self.emit(EventKind.UPDATE_CHANNEL, {"client": client, "relay": relay,
                                                     "balances": rec["balances"], "nonce": rec["nonce"],
                                                     "batch_seq": batch_seq})
            self.storage.set(f"ch:{client}", rec)
        self.storage.set(f"seq:{relay}", batch_seq)
        return {"batch_seq": batch_seq, "applied": len(txs)}

    def close_channel(self, relay: str, packet: str, residual: list[str], final: dict, proof: str) -> dict:
        pkt = SignedPacket.from_bytes(_unhex(packet, "packet"))
        if pkt.content.kind != PacketKind.CLOSE_CHANNEL or not pkt.verify():
            raise ContractError("bad close request")
        client = pkt.sender
        rec = self.channel(client)
        if rec is None or rec["relay"] != relay:
            raise ContractError("unknown channel")
        if pkt.content.nonce != self.storage.get(f"gen:{client}", 0):
            raise ContractError("close request for another channel generation")
        txs = [OffchainTx.from_bytes(_unhex(h, "tx")) for h in residual]
        final = {k: int(v) for k, v in final.items()}
        payload = close_digest_payload(self.chain.chain_id, self.contract_id, relay, pkt, txs, final)
        self.check_proof(proof, TAG_CLOSE, payload)
        if any(tx.payer != client for tx in txs):
            raise ContractError("residual tx from another channel")
        rec = self._apply(relay, txs).get(client, rec)
        self._aggregate(rec)
        if rec["balances"] != {k: v for k, v in final.items() if v}:
            raise ContractError("submitted final state does not match channel")
        for account in sorted(rec["balances"]):
            self.transfer(self.address, account, rec["balances"][account])
        self.storage.delete(f"ch:{client}")
        self.emit(EventKind.CLOSE_CHANNEL, {"client": client, "relay": relay, "refunds": rec["balances"],
                                            "nonce": rec["nonce"]})
        return {"refunds": rec["balances"]}


# --- cross-chain proxy -------------------------------------------------------

AcceptHandler = Callable[["ProxyContract", CrossChainRequest, str], None]


def credit_handler(proxy: "ProxyContract", request: CrossChainRequest, account: str) -> None:
    """Reference destination effect: pay ``amount`` to ``account`` from the proxy reserve."""
    proxy.transfer(proxy.address, account, request.amount)


class ProxyContract(_Attested):
    """Source and destination proxy. ``pending`` entries live under ``req:<id>``."""

    METHODS = ("cross_query", "cross_accept", "cross_callback")

    def constructor(self, registry: AggregateRegistry, quorum: int,
                    handler: AcceptHandler = credit_handler, **kw) -> None:
        super().constructor(registry, quorum)
        self.handler = handler

    def cross_query(self, packet: str, uuid: str) -> dict:
        pkt = SignedPacket.from_bytes(_unhex(packet, "packet"))
        if pkt.content.kind != PacketKind.CROSS_CHAIN or not pkt.verify():
            raise ContractError("bad cross-chain request")
        try:
            req = request_from_packet(pkt, uuid)
        except ValueError as exc:
            raise ContractError(f"malformed request: {exc}") from None
        if req.src_chain != self.chain.chain_id:
            raise ContractError("request names another source chain")
        if not req.to or any(not c or not a for c, a in req.to):
            raise ContractError("request needs at least one destination")
        key = f"req:{req.req_id}"
        if key in self.storage or f"done:{req.req_id}" in self.storage:
            raise ContractError("duplicate request id")
        self.transfer(req.sender, self.address, req.amount * len(req.to))
        raw = req.to_bytes().hex()
        self.storage.set(key, {"request": raw, "status": "Pending"})
        self.emit(EventKind.REQUEST, {"req_id": req.req_id, "request": raw})
        return {"req_id": req.req_id}

    def cross_accept(self, request: str, proof: str) -> dict:
        raw = _unhex(request, "request")
        try:
            req = CrossChainRequest.from_bytes(raw)
        except ValueError as exc:
            raise ContractError(f"malformed request: {exc}") from None
        self.check_proof(proof, TAG_REQUEST, raw)
        key = f"accepted:{req.req_id}"
        if key in self.storage:
            raise ContractError("request already accepted")
        mine = [acct for chain, acct in req.to if chain == self.chain.chain_id]
        if not mine:
            raise ContractError("request has no destination on this chain")
        for account in mine:
            self.handler(self, req, account)
        self.storage.set(key, self.height)
        self.emit(EventKind.ACCEPT, {"req_id": req.req_id, "chain": self.chain.chain_id,
                                     "height": self.height, "outcome": 0})
        return {"req_id": req.req_id, "height": self.height}

    def cross_callback(self, result: str, proof: str) -> dict:
        raw = _unhex(result, "result")
        try:
            req_id, dests = decode_result(raw)
        except ValueError as exc:
            raise ContractError(f"malformed result: {exc}") from None
        entry = self.storage.get(f"req:{req_id}")
        if entry is None or entry["status"] != "Pending":
            raise ContractError("no pending request with that id")
        self.check_proof(proof, TAG_RESULT, raw)
        req = CrossChainRequest.from_bytes(bytes.fromhex(entry["request"]))
        if [d.chain_id for d in dests] != req.dest_chains:
            raise ContractError("result does not cover every destination")
        self.storage.delete(f"req:{req_id}")
        self.storage.set(f"done:{req_id}", raw.hex())
        self.emit(EventKind.CALLBACK, {"req_id": req_id, "result": raw.hex()})
        return {"req_id": req_id}

    def pending_ids(self) -> list[str]:
        return [k[4:] for k in self.storage.keys() if k.startswith("req:")]


# --- compute -----------------------------------------------------------------

DEFAULT_TASK_KINDS = {TASK_ACCOUNT_ACTIVITY: "account-activity", TASK_BALANCE_AT_HEIGHT: "balance-at-height"}


class CompContract(_Attested):
    METHODS = ("submit_task", "task_callback")

    def constructor(self, registry: AggregateRegistry, quorum: int,
                    kinds: dict[int, str] | None = None, **kw) -> None:
        super().constructor(registry, quorum)
        self.storage.set("kinds", sorted(kinds or DEFAULT_TASK_KINDS))

    def submit_task(self, packet: str, uuid: str) -> dict:
        pkt = SignedPacket.from_bytes(_unhex(packet, "packet"))
        if pkt.content.kind != PacketKind.COMPUTE_TASK or not pkt.verify():
            raise ContractError("bad task request")
        try:
            task = task_from_packet(pkt, uuid)
        except ValueError as exc:
            raise ContractError(f"malformed task: {exc}") from None
        if task.kind not in self.storage.get("kinds"):
            raise ContractError(f"unknown task kind {task.kind}")
        key = f"task:{task.task_id}"
        if key in self.storage:
            raise ContractError("duplicate task id")
        raw = task.to_bytes().hex()
        self.storage.set(key, {"task": raw, "status": "Pending", "result": None})
        self.emit(EventKind.REQUEST, {"task_id": task.task_id, "task": raw})
        return {"task_id": task.task_id}

    def task_callback(self, result: str, proof: str) -> dict:
        raw = _unhex(result, "result")
        try:
            task_id, payload = split_task_result(raw)
        except ValueError as exc:
            raise ContractError(f"malformed result: {exc}") from None
        rec = self.storage.get(f"task:{task_id}")
        if rec is None or rec["status"] != "Pending":
            raise ContractError("no pending task with that id")
        self.check_proof(proof, TAG_TASK_RESULT, task_result_bytes(task_id, payload))
        rec.update(status="Completed", result=payload.hex())
        self.storage.set(f"task:{task_id}", rec)
        self.emit(EventKind.CALLBACK, {"task_id": task_id, "payload": payload.hex()})
        return {"task_id": task_id}


class WalletContract(Contract):
    """Plain native transfers, used to script ledgers for analysis tasks."""

    METHODS = ("send",)

    def send(self, receiver: str, amount: int) -> None:
        self.transfer(self.caller, receiver, amount)
