"""Byte layouts that relays sign and contracts verify.

Every ``to_bytes`` here is canonical: fixed field order, big-endian integers,
4-byte length prefixes. The attestation message for a payload is a purpose
tag followed by the SHA-256 of the payload, so a proof made for one purpose
can never be replayed for another.
"""

from __future__ import annotations

from dataclasses import dataclass

from bcmon.codec import Reader, canonical_json, lp, lp_list, sha256, u8, u32, u64
from bcmon.crypto.client import address_of, client_verify
from bcmon.transport import PacketContent, PacketKind

TAG_UPDATE = b"bcmon/update-channel/v1"
TAG_CLOSE = b"bcmon/close-channel/v1"
TAG_REQUEST = b"bcmon/xchain-request/v1"
TAG_RESULT = b"bcmon/xchain-result/v1"
TAG_TASK_RESULT = b"bcmon/task-result/v1"


def attest_message(tag: bytes, payload: bytes) -> bytes:
    return tag + sha256(payload)


@dataclass(frozen=True)
class SignedPacket:
    """A client-signed packet content plus the key that signed it."""

    pk: bytes
    content: PacketContent
    signature: bytes

    @property
    def sender(self) -> str:
        return address_of(self.pk)

    def verify(self) -> bool:
        return client_verify(self.pk, self.content.to_bytes(), self.signature)

    def to_bytes(self) -> bytes:
        return lp(self.pk) + lp(self.content.to_bytes()) + lp(self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignedPacket":
        r = Reader(data)
        pk = r.lp()
        content = PacketContent.from_bytes(r.lp())
        sig = r.lp()
        r.done()
        return cls(pk, content, sig)


@dataclass(frozen=True)
class OffchainTx:
    """An off-chain transfer from the owner of a channel, as signed by them."""

    packet: SignedPacket

    @property
    def payer(self) -> str:
        return self.packet.sender

    @property
    def payee(self) -> str:
        return self.packet.content.dest_address

    @property
    def amount(self) -> int:
        return self.packet.content.amount

    @property
    def nonce(self) -> int:
        return self.packet.content.nonce

    def to_bytes(self) -> bytes:
        return self.packet.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "OffchainTx":
        tx = cls(SignedPacket.from_bytes(data))
        if tx.packet.content.kind != PacketKind.OFF_CHAIN_PAY:
            raise ValueError("not an off-chain payment")
        return tx

    @property
    def tx_hash(self) -> str:
        return sha256(self.to_bytes()).hex()


def balances_bytes(balances: dict[str, int]) -> bytes:
    items = sorted((k, v) for k, v in balances.items() if v)
    return u32(len(items)) + b"".join(lp(k) + u64(v) for k, v in items)


def update_digest_payload(chain_id: str, contract_id: str, relay: str, batch_seq: int,
                          txs: list[OffchainTx]) -> bytes:
    return (lp(chain_id) + lp(contract_id) + lp(relay) + u64(batch_seq)
            + lp_list([t.to_bytes() for t in txs]))


def close_digest_payload(chain_id: str, contract_id: str, relay: str, close: SignedPacket,
                         residual: list[OffchainTx], final_balances: dict[str, int]) -> bytes:
    return (lp(chain_id) + lp(contract_id) + lp(relay) + lp(close.to_bytes())
            + lp_list([t.to_bytes() for t in residual]) + balances_bytes(final_balances))


# --- cross-chain -------------------------------------------------------------

@dataclass(frozen=True)
class CrossChainRequest:
    req_id: str
    src_chain: str
    sender: str
    to: tuple[tuple[str, str], ...]
    amount: int
    data: bytes = b""
    uuid: str = ""

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError("amount must be >= 0")

    @property
    def dest_chains(self) -> list[str]:
        return sorted({c for c, _ in self.to})

    def to_bytes(self) -> bytes:
        dests = b"".join(lp(c) + lp(a) for c, a in self.to)
        return (lp(b"xreq") + lp(self.req_id) + lp(self.src_chain) + lp(self.sender)
                + u32(len(self.to)) + dests + u64(self.amount) + lp(self.data) + lp(self.uuid))

    @classmethod
    def from_bytes(cls, data: bytes) -> "CrossChainRequest":
        r = Reader(data)
        if r.lp() != b"xreq":
            raise ValueError("not a cross-chain request")
        req_id, src, sender = r.lp_str(), r.lp_str(), r.lp_str()
        to = tuple((r.lp_str(), r.lp_str()) for _ in range(r.u32()))
        out = cls(req_id, src, sender, to, r.u64(), r.lp(), r.lp_str())
        r.done()
        return out


def encode_xchain_body(src_chain: str, to: list[tuple[str, str]] | tuple, data: bytes = b"") -> bytes:
    """The ``data`` field of a client's CrossChain packet."""
    return lp(src_chain) + u32(len(to)) + b"".join(lp(c) + lp(a) for c, a in to) + lp(data)


def decode_xchain_body(body: bytes) -> tuple[str, tuple[tuple[str, str], ...], bytes]:
    r = Reader(body)
    src = r.lp_str()
    to = tuple((r.lp_str(), r.lp_str()) for _ in range(r.u32()))
    data = r.lp()
    r.done()
    return src, to, data


def request_id_for(uuid: str, sender: str) -> str:
    return sha256(f"{sender}|{uuid}".encode()).hex()[:24]


def request_from_packet(packet: SignedPacket, uuid: str) -> CrossChainRequest:
    src, to, data = decode_xchain_body(packet.content.data)
    return CrossChainRequest(request_id_for(uuid, packet.sender), src, packet.sender,
                             to, packet.content.amount, data, uuid)


@dataclass(frozen=True)
class DestResult:
    chain_id: str
    accept_height: int
    outcome: int = 0


def encode_result(req_id: str, results: list[DestResult]) -> bytes:
    rs = sorted(results, key=lambda d: d.chain_id)
    body = b"".join(lp(d.chain_id) + u64(d.accept_height) + u8(d.outcome) for d in rs)
    return lp(b"xres") + lp(req_id) + u32(len(rs)) + body


def decode_result(data: bytes) -> tuple[str, list[DestResult]]:
    r = Reader(data)
    if r.lp() != b"xres":
        raise ValueError("not a cross-chain result")
    req_id = r.lp_str()
    out = [DestResult(r.lp_str(), r.u64(), r.u8()) for _ in range(r.u32())]
    r.done()
    return req_id, out


# --- compute tasks -----------------------------------------------------------

TASK_ACCOUNT_ACTIVITY = 1
TASK_BALANCE_AT_HEIGHT = 2


@dataclass(frozen=True)
class ComputeTask:
    task_id: str
    kind: int
    target_account: str
    window: tuple[int, int]
    sources: tuple[str, ...]

    def __post_init__(self):
        lo, hi = self.window
        if lo > hi:
            raise ValueError("empty window")
        if not self.sources:
            raise ValueError("task needs at least one data source")

    def to_bytes(self) -> bytes:
        return (lp(b"task") + lp(self.task_id) + u8(self.kind) + lp(self.target_account)
                + u64(self.window[0]) + u64(self.window[1])
                + lp_list([s.encode() for s in self.sources]))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ComputeTask":
        r = Reader(data)
        if r.lp() != b"task":
            raise ValueError("not a compute task")
        task_id, kind, target = r.lp_str(), r.u8(), r.lp_str()
        window = (r.u64(), r.u64())
        sources = tuple(s.decode() for s in r.lp_list())
        r.done()
        return cls(task_id, kind, target, window, sources)


def encode_task_body(kind: int, target: str, window: tuple[int, int], sources: list[str]) -> bytes:
    """The ``data`` field of a client's ComputeTask packet."""
    return (u8(kind) + lp(target) + u64(window[0]) + u64(window[1])
            + lp_list([s.encode() for s in sources]))


def task_from_packet(packet: SignedPacket, uuid: str) -> ComputeTask:
    r = Reader(packet.content.data)
    kind, target = r.u8(), r.lp_str()
    window = (r.u64(), r.u64())
    sources = tuple(s.decode() for s in r.lp_list())
    r.done()
    return ComputeTask(request_id_for(uuid, packet.sender), kind, target, window, sources)


def task_result_bytes(task_id: str, payload: bytes) -> bytes:
    return lp(b"tres") + lp(task_id) + lp(payload)


def split_task_result(data: bytes) -> tuple[str, bytes]:
    r = Reader(data)
    if r.lp() != b"tres":
        raise ValueError("not a task result")
    task_id, payload = r.lp_str(), r.lp()
    r.done()
    return task_id, payload


def json_digest(obj) -> str:
    return sha256(canonical_json(obj).encode()).hex()
