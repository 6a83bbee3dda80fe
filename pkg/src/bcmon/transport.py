"""Simulated SMS link between offline clients and relay nodes.

Packets are split into segments of at most 140 bytes. Each segment is lost
independently with probability ``loss_percent / 100``; surviving segments
arrive ``latency + ceil(cumulative_bits / bandwidth)`` ms after sending, so
segments of one packet are serialised on the link. A packet is delivered
when its last segment arrives, or never if any segment is lost.

Loss draws are keyed by ``(seed, uuid, attempt, direction, seq_no)`` rather
than drawn from a shared stream, so whether a given transmission survives
does not depend on how many other messages the simulation happened to send.
"""

from __future__ import annotations

import enum
import hashlib
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from bcmon.codec import Reader, lp, u8, u64
from bcmon.crypto.client import ClientKeyPair, client_sign, client_verify

SEGMENT_BYTES = 140


@dataclass(frozen=True)
class NetworkProfile:
    name: str
    latency_ms: float
    bandwidth_kbit: float
    loss_percent: float

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ValueError("latency must be >= 0")
        if self.bandwidth_kbit <= 0:
            raise ValueError("bandwidth must be > 0")
        if not 0 <= self.loss_percent <= 100:
            raise ValueError("loss must lie in [0, 100]")

    def transmit_ms(self, nbytes: int) -> int:
        # kbit/s is numerically bits/ms
        return math.ceil(nbytes * 8 / self.bandwidth_kbit)


PROFILES: dict[str, NetworkProfile] = {
    # no shaping applied
    "DEFAULT": NetworkProfile("DEFAULT", 0, 1_000_000, 0.0),
    "WIFI": NetworkProfile("WIFI", 40, 30000, 0.2),
    "EDGE": NetworkProfile("EDGE", 300, 250, 1.5),
    "GPRS": NetworkProfile("GPRS", 500, 50, 2.0),
}


def load_profile(spec: str | Mapping | Sequence) -> NetworkProfile:
    """Profile by name, ``{latency_ms, bandwidth_kbit, loss_percent}`` or a triple."""
    if isinstance(spec, NetworkProfile):
        return spec
    if isinstance(spec, str):
        try:
            return PROFILES[spec.upper()]
        except KeyError:
            raise ValueError(f"unknown network profile {spec!r}") from None
    if isinstance(spec, Mapping):
        return NetworkProfile(str(spec.get("name", "CUSTOM")), spec["latency_ms"],
                              spec["bandwidth_kbit"], spec["loss_percent"])
    tau, beta, iota = spec
    return NetworkProfile("CUSTOM", tau, beta, iota)


class PacketKind(enum.IntEnum):
    OPEN_CHANNEL = 1
    OFF_CHAIN_PAY = 2
    CLOSE_CHANNEL = 3
    CROSS_CHAIN = 4
    COMPUTE_TASK = 5


@dataclass(frozen=True)
class PacketContent:
    kind: PacketKind
    dest_address: str = ""
    amount: int = 0
    nonce: int = 0
    data: bytes = b""

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError("amount must be >= 0")

    def to_bytes(self) -> bytes:
        return (u8(self.kind) + lp(self.dest_address) + u64(self.amount)
                + u64(self.nonce) + lp(self.data))

    @classmethod
    def from_bytes(cls, data: bytes) -> "PacketContent":
        r = Reader(data)
        kind = r.u8()
        out = cls(PacketKind(kind), r.lp_str(), r.u64(), r.u64(), r.lp())
        r.done()
        return out


@dataclass(frozen=True)
class SmsPacket:
    uuid: str
    mobile: str
    content: PacketContent
    sender_address: str
    signature: bytes
    timestamp: int = 0

    def to_bytes(self) -> bytes:
        return (lp(self.uuid) + lp(self.mobile) + lp(self.content.to_bytes())
                + lp(self.sender_address) + lp(self.signature) + u64(self.timestamp))

    @classmethod
    def from_bytes(cls, data: bytes) -> "SmsPacket":
        r = Reader(data)
        uuid, mobile = r.lp_str(), r.lp_str()
        content = PacketContent.from_bytes(r.lp())
        out = cls(uuid, mobile, content, r.lp_str(), r.lp(), r.u64())
        r.done()
        return out

    def verify(self, pk: bytes) -> bool:
        return client_verify(pk, self.content.to_bytes(), self.signature)


def make_packet(kp: ClientKeyPair, uuid: str, mobile: str, content: PacketContent,
                timestamp: int = 0) -> SmsPacket:
    sig = client_sign(kp, content.to_bytes())
    return SmsPacket(uuid, mobile, content, kp.address, sig, timestamp)


@dataclass(frozen=True)
class SmsSegment:
    uuid: str
    seq_no: int
    total: int
    payload: bytes


class IncompleteMessage(ValueError):
    pass


def segment(data: bytes, uuid: str = "") -> list[SmsSegment]:
    data = bytes(data)
    total = max(1, math.ceil(len(data) / SEGMENT_BYTES))
    return [SmsSegment(uuid, i, total, data[i * SEGMENT_BYTES:(i + 1) * SEGMENT_BYTES])
            for i in range(total)]


def reassemble(segments: Iterable[SmsSegment]) -> bytes:
    segs = list(segments)
    if not segs:
        raise IncompleteMessage("no segments")
    uuid, total = segs[0].uuid, segs[0].total
    by_seq: dict[int, bytes] = {}
    for s in segs:
        if s.uuid != uuid or s.total != total:
            raise ValueError("segments from different messages")
        by_seq[s.seq_no] = s.payload
    missing = set(range(total)) - by_seq.keys()
    if missing:
        raise IncompleteMessage(f"missing segments {sorted(missing)}")
    return b"".join(by_seq[i] for i in range(total))


def loss_draw(seed: int, uuid: str, attempt: int, direction: str, seq_no: int) -> float:
    key = f"{seed}|{uuid}|{attempt}|{direction}|{seq_no}".encode()
    return random.Random(hashlib.blake2b(key, digest_size=8).digest()).random()


@dataclass
class DeliverySchedule:
    """Per-segment arrival times (``None`` = lost) and the packet arrival time."""

    segments: list[tuple[SmsSegment, int | None]]
    delivered_at: int | None = field(default=None)

    @property
    def delivered(self) -> bool:
        return self.delivered_at is not None


def send(data: bytes, uuid: str, profile: NetworkProfile, now: int, *, seed: int = 0,
         attempt: int = 0, direction: str = "up") -> DeliverySchedule:
    """Schedule the segments of one packet over ``profile``."""
    segs = segment(data, uuid)
    p_loss = profile.loss_percent / 100.0
    out: list[tuple[SmsSegment, int | None]] = []
    sent_bytes = 0
    all_arrived = True
    last = now
    for s in segs:
        sent_bytes += len(s.payload)
        if p_loss > 0 and loss_draw(seed, uuid, attempt, direction, s.seq_no) < p_loss:
            out.append((s, None))
            all_arrived = False
            continue
        t = now + math.ceil(profile.latency_ms) + profile.transmit_ms(sent_bytes)
        out.append((s, t))
        last = max(last, t)
    return DeliverySchedule(out, last if all_arrived else None)


def packet_delay(data: bytes, uuid: str, profile: NetworkProfile, *, seed: int = 0,
                 attempt: int = 0, direction: str = "up") -> int | None:
    """Delay until the whole packet arrives, or ``None`` if it is lost."""
    sched = send(data, uuid, profile, 0, seed=seed, attempt=attempt, direction=direction)
    return sched.delivered_at


class Deduplicator:
    """Receiver-side filter: each uuid passes at most once."""

    def __init__(self):
        self._seen: set[str] = set()

    def first_time(self, uuid: str) -> bool:
        if uuid in self._seen:
            return False
        self._seen.add(uuid)
        return True

    def __contains__(self, uuid: str) -> bool:
        return uuid in self._seen


@dataclass
class RetryState:
    packet: SmsPacket
    ack_timeout_ms: int
    max_attempts: int
    attempts: int = 0
    acked: bool = False
    undeliverable: bool = False

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def next_attempt(self) -> int | None:
        """Attempt number to send next, or ``None`` once acked or exhausted."""
        if self.acked or self.undeliverable:
            return None
        if self.attempts >= self.max_attempts:
            self.undeliverable = True
            return None
        self.attempts += 1
        return self.attempts - 1


def client_retry(packet: SmsPacket, profile: NetworkProfile, ack_timeout_ms: int,
                 max_attempts: int, *, seed: int = 0, now: int = 0,
                 drop_attempts: Sequence[int] = (), ack_delay_ms: int = 0) -> dict:
    """Drive retransmissions of one packet without a full simulation.

    Returns the attempt log, the times at which the receiver saw the packet,
    how many times the receiver processed it (after uuid dedup), and whether
    it ended acked or undeliverable. ``drop_attempts`` scripts losses on top
    of the profile's random loss. The ack path is assumed lossless here.
    """
    state = RetryState(packet, ack_timeout_ms, max_attempts)
    dedup = Deduplicator()
    data = packet.to_bytes()
    log, arrivals, processed = [], [], 0
    t = now
    while (attempt := state.next_attempt()) is not None:
        sched = send(data, packet.uuid, profile, t, seed=seed, attempt=attempt)
        arrived = sched.delivered_at if attempt not in drop_attempts else None
        log.append({"attempt": attempt, "sent_at": t, "arrived_at": arrived})
        if arrived is not None:
            arrivals.append(arrived)
            if dedup.first_time(packet.uuid):
                processed += 1
            if arrived + ack_delay_ms <= t + ack_timeout_ms:
                state.acked = True
                break
        t += ack_timeout_ms
    return {"attempts": log, "arrivals": arrivals, "processed": processed,
            "acked": state.acked, "undeliverable": state.undeliverable}
