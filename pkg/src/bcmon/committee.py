"""Static setup shared by every relay: keys, quorum, costs and wire messages."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from bcmon.bft import max_faults, quorum_size
from bcmon.codec import Reader, lp, u8, u32
from bcmon.crypto.bls import AggregateRegistry, RelayKeyPair, relay_keygen
from bcmon.crypto.client import ClientKeyPair, client_keygen
from bcmon.crypto.groups import BilinearGroup
from bcmon.transport import NetworkProfile, PROFILES


@dataclass
class Committee:
    keys: list[RelayKeyPair]
    signers: list[ClientKeyPair]  # leader signatures on prepare messages
    f: int
    relay_id: str = "ofbs"

    def __post_init__(self):
        if len(self.keys) != len(self.signers):
            raise ValueError("one signing key per relay")
        self.registry = AggregateRegistry.from_keypairs(self.keys)
        self.quorum = quorum_size(self.n, self.f)

    @classmethod
    def generate(cls, n: int, group: BilinearGroup, seed: int = 0, f: int | None = None) -> "Committee":
        f = max_faults(n) if f is None else f
        keys = [relay_keygen(f"relay|{seed}|{i}", group) for i in range(n)]
        signers = [client_keygen(f"relay-signer|{seed}|{i}") for i in range(n)]
        return cls(keys, signers, f)

    @property
    def n(self) -> int:
        return len(self.keys)

    @property
    def group(self) -> BilinearGroup:
        return self.registry.group

    @staticmethod
    def pid(i: int) -> str:
        return f"relay:{i}"

    @property
    def pids(self) -> list[str]:
        return [self.pid(i) for i in range(self.n)]


@dataclass(frozen=True)
class Costs:
    """Virtual processing time charged to a relay, in ms."""

    msg_ms: float = 0.5
    client_verify_ms: float = 1.0
    db_ms: float = 1.0
    bls_sign_ms: float = 1.0
    bls_verify_ms: float = 2.0
    scan_ms_per_kb: float = 0.05

    def __post_init__(self):
        if any(v < 0 for v in (self.msg_ms, self.client_verify_ms, self.db_ms,
                               self.bls_sign_ms, self.bls_verify_ms, self.scan_ms_per_kb)):
            raise ValueError("costs must be >= 0")


@dataclass
class RelayConfig:
    buffer: int = 5
    timeout_ms: int = 1000
    max_hold_ms: int | None = None
    tick_ms: int = 50
    link_ms: int = 2
    rpc_ms: int = 5
    vc_timeout_ms: int = 1500
    op_timeout_ms: int = 6000
    epoch_ms: int = 5000
    stuck_epochs: int = 10
    profile: NetworkProfile = field(default_factory=lambda: PROFILES["DEFAULT"])
    costs: Costs = field(default_factory=Costs)
    channel_chain: str = "A"
    comp_chain: str = "A"
    chains: tuple[str, ...] = ("A",)
    seed: int = 0


@dataclass(frozen=True)
class ClientInfo:
    address: str
    pk: bytes
    pid: str


# --- wire messages -----------------------------------------------------------

class AckCode(enum.IntEnum):
    OK = 0
    REJECTED = 1
    STUCK = 2
    NOTIFY = 3


@dataclass(frozen=True)
class AckBody:
    uuid: str
    code: AckCode
    text: str = ""

    def to_bytes(self) -> bytes:
        return lp(self.uuid) + u8(self.code) + lp(self.text)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AckBody":
        r = Reader(data)
        out = cls(r.lp_str(), AckCode(r.u8()), r.lp_str())
        r.done()
        return out

    def fields(self) -> dict[str, str]:
        out = {}
        for part in self.text.split(","):
            if "=" in part:
                k, v = part.split("=", 1)
                out[k] = v
        return out


@dataclass(frozen=True)
class SmsDeliver:
    """A reassembled uplink SMS arriving at a relay."""

    data: bytes
    attempt: int
    reply_to: str


@dataclass(frozen=True)
class SmsReply:
    data: bytes


@dataclass(frozen=True)
class PrepareMsg:
    """Leader's signed proposal of the bytes to attest for a topic."""

    topic: str
    payload: bytes
    leader: int
    epoch: int
    sig: bytes

    @staticmethod
    def signing_bytes(topic: str, epoch: int, payload: bytes) -> bytes:
        return lp(b"prepare") + lp(topic) + u32(epoch) + lp(payload)


@dataclass(frozen=True)
class Tick:
    pass


def mobile_of(i: int) -> str:
    return f"+1555{i:07d}"

