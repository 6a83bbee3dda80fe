"""Collect per-relay BLS signatures on a topic until a quorum agrees.

Signatures are grouped by the digest of what was signed, so relays that
computed different payloads form separate candidate sets and only a set that
reaches the quorum is aggregated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from bcmon.codec import sha256
from bcmon.crypto.bls import AggregateProof, AggregateRegistry, aggregate, relay_verify
from bcmon.records import attest_message


@dataclass(frozen=True)
class AttestMsg:
    """One relay's signature over ``attest_message(tag, payload)``."""

    topic: str
    tag: bytes
    payload: bytes
    idx: int
    bsig: Any = field(compare=False)


@dataclass
class _Topic:
    sets: dict[bytes, dict[int, Any]] = field(default_factory=dict)
    payloads: dict[bytes, bytes] = field(default_factory=dict)
    proof: AggregateProof | None = None
    payload: bytes | None = None
    rejected: int = 0


class SigCollector:
    def __init__(self, registry: AggregateRegistry, quorum: int):
        self.registry = registry
        self.quorum = quorum
        self.topics: dict[str, _Topic] = {}
        # append-only record of every accepted (topic, payload digest, signer)
        self.log: list[tuple[str, bytes, int]] = []

    def proof(self, topic: str) -> tuple[AggregateProof, bytes] | None:
        t = self.topics.get(topic)
        if t is None or t.proof is None:
            return None
        return t.proof, t.payload

    def add(self, msg: AttestMsg) -> bool:
        """Verify and record ``msg``; returns True when this message completed a quorum.

        Signatures from unknown indices or failing the pairing check are
        dropped and counted in ``rejected``.
        """
        t = self.topics.setdefault(msg.topic, _Topic())
        if t.proof is not None:
            return False
        if not 0 <= msg.idx < self.registry.n:
            t.rejected += 1
            return False
        digest = sha256(msg.payload)
        members = t.sets.setdefault(digest, {})
        if msg.idx in members:
            return False
        message = attest_message(msg.tag, msg.payload)
        if not relay_verify(msg.bsig, self.registry.apub[msg.idx], message, self.registry.group):
            t.rejected += 1
            return False
        members[msg.idx] = msg.bsig
        self.log.append((msg.topic, digest, msg.idx))
        t.payloads[digest] = msg.payload
        if len(members) >= self.quorum:
            # first ``quorum`` contributors in arrival order
            chosen = list(members.items())[:self.quorum]
            t.proof = aggregate([(i, s, self.registry.apub[i]) for i, s in chosen],
                                self.registry.n, self.registry.group)
            t.payload = msg.payload
            return True
        return False

    def candidate_sizes(self, topic: str) -> list[int]:
        t = self.topics.get(topic)
        return sorted((len(m) for m in t.sets.values()), reverse=True) if t else []


def aggregate_results(results: list[tuple[int, bytes, Any]], registry: AggregateRegistry, quorum: int,
                      tag: bytes) -> tuple[AggregateProof, bytes] | None:
    """Fold ``(idx, payload, bsig)`` results; the first payload to reach ``quorum`` wins."""
    col = SigCollector(registry, quorum)
    for idx, payload, bsig in results:
        if col.add(AttestMsg("t", tag, payload, idx, bsig)):
            return col.proof("t")
    return None
