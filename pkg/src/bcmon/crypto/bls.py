"""Relay attestation: BLS signatures with public keys in G1, signatures in G2.

A committee of ``n`` relays signs the same message; any ``w >= quorum`` of
them can be folded into an :class:`AggregateProof` ``(subsig, subpub, mask)``
that a contract checks against the fixed committee registry.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from bcmon.codec import Reader, lp, u32
from bcmon.crypto.groups import BilinearGroup, get_group


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class RelayKeyPair:
    bsk: int
    bpk: Any = field(compare=False)
    group: BilinearGroup = field(compare=False, repr=False)

    @classmethod
    def from_secret(cls, bsk: int, group: BilinearGroup | None = None) -> "RelayKeyPair":
        group = group or get_group()
        if not 0 < bsk < group.order:
            raise ValueError("secret scalar must lie in [1, order)")
        return cls(bsk, group.g1_mul(group.g1, bsk), group)

    @property
    def bpk_bytes(self) -> bytes:
        return self.group.g1_to_bytes(self.bpk)


def relay_keygen(seed: int | bytes | str, group: BilinearGroup | None = None) -> RelayKeyPair:
    """Derive a key pair from ``seed``; zero scalars are skipped by re-hashing."""
    group = group or get_group()
    if isinstance(seed, int):
        seed = seed.to_bytes((seed.bit_length() + 8) // 8, "big", signed=True)
    elif isinstance(seed, str):
        seed = seed.encode()
    ctr = 0
    while True:
        digest = hashlib.sha512(b"bcmon-relay-key" + u32(ctr) + seed).digest()
        bsk = int.from_bytes(digest, "big") % group.order
        if bsk:
            return RelayKeyPair.from_secret(bsk, group)
        ctr += 1


def hash_to_g2(message: bytes, group: BilinearGroup | None = None) -> Any:
    return (group or get_group()).hash_to_g2(message)


def relay_sign(kp: RelayKeyPair, message: bytes) -> Any:
    group = kp.group
    return group.g2_mul(group.hash_to_g2(message), kp.bsk)


def _coerce(group: BilinearGroup, x: Any, which: str) -> Any:
    if isinstance(x, (bytes, bytearray)):
        decode = group.g1_from_bytes if which == "g1" else group.g2_from_bytes
        return decode(bytes(x))
    return x


def relay_verify(sig: Any, bpk: Any, message: bytes, group: BilinearGroup | None = None) -> bool:
    """``e(g1, sig) == e(bpk, H(m))``. Malformed inputs verify as ``False``."""
    group = group or get_group()
    try:
        sig = _coerce(group, sig, "g2")
        bpk = _coerce(group, bpk, "g1")
        if group.g1_eq(bpk, group.g1_identity()):
            return False
        # e(g1, sig) * e(-bpk, H(m)) == 1, one final exponentiation
        return group.pairings_cancel([group.g1, group.g1_neg(bpk)], [sig, group.hash_to_g2(message)])
    except (ValueError, TypeError):
        return False


@dataclass(frozen=True)
class AggregateProof:
    subsig: Any = field(compare=False)
    subpub: Any = field(compare=False)
    mask: tuple[int, ...]

    @property
    def signers(self) -> list[int]:
        return [i for i, bit in enumerate(self.mask) if bit]

    @property
    def popcount(self) -> int:
        return sum(self.mask)


@dataclass(frozen=True)
class AggregateRegistry:
    """The full committee key list written into contracts at deployment."""

    apub: tuple[Any, ...]
    group: BilinearGroup = field(repr=False)

    @classmethod
    def from_keypairs(cls, kps: Sequence[RelayKeyPair]) -> "AggregateRegistry":
        if not kps:
            raise ValueError("empty committee")
        return cls(tuple(kp.bpk for kp in kps), kps[0].group)

    @property
    def n(self) -> int:
        return len(self.apub)

    def index_of(self, bpk: Any) -> int | None:
        for i, key in enumerate(self.apub):
            if self.group.g1_eq(key, bpk):
                return i
        return None

    def to_bytes(self) -> bytes:
        return u32(self.n) + b"".join(lp(self.group.g1_to_bytes(k)) for k in self.apub)


def aggregate(sigs: Iterable[tuple[int, Any, Any]], n: int,
              group: BilinearGroup | None = None) -> AggregateProof:
    """Fold ``(index, bsig, bpk)`` triples into one proof.

    Component signatures are assumed to have been verified by the caller.
    """
    group = group or get_group()
    subsig = group.g2_identity()
    subpub = group.g1_identity()
    mask = [0] * n
    for idx, bsig, bpk in sigs:
        if not 0 <= idx < n:
            raise AggregationError(f"signer index {idx} outside committee of {n}")
        if mask[idx]:
            raise AggregationError(f"duplicate signer index {idx}")
        mask[idx] = 1
        subsig = group.g2_add(subsig, bsig)
        subpub = group.g1_add(subpub, bpk)
    return AggregateProof(subsig, subpub, tuple(mask))


def verify_aggregate_same_message(proof: AggregateProof, registry: AggregateRegistry,
                                  message: bytes, quorum: int) -> bool:
    group = registry.group
    if len(proof.mask) != registry.n:
        raise AggregationError(f"mask length {len(proof.mask)} != committee size {registry.n}")
    if proof.popcount < quorum:
        return False
    expected = group.g1_identity()
    for i in proof.signers:
        expected = group.g1_add(expected, registry.apub[i])
    try:
        subpub = _coerce(group, proof.subpub, "g1")
        subsig = _coerce(group, proof.subsig, "g2")
        if not group.g1_eq(expected, subpub):
            return False
        return group.pairings_cancel([group.g1, group.g1_neg(subpub)], [subsig, group.hash_to_g2(message)])
    except (ValueError, TypeError):
        return False


def mask_to_bytes(mask: Sequence[int]) -> bytes:
    bits = bytearray((len(mask) + 7) // 8)
    for i, bit in enumerate(mask):
        if bit:
            bits[i // 8] |= 0x80 >> (i % 8)
    return u32(len(mask)) + bytes(bits)


def mask_from_bytes(data: bytes) -> tuple[int, ...]:
    r = Reader(data)
    n = r.u32()
    bits = r.take((n + 7) // 8)
    r.done()
    mask = tuple(1 if bits[i // 8] & (0x80 >> (i % 8)) else 0 for i in range(n))
    if n % 8 and bits[-1] & (0xFF >> (n % 8)):
        raise ValueError("padding bits set in mask")
    return mask


def encode_proof(proof: AggregateProof, group: BilinearGroup) -> bytes:
    return (lp(group.g2_to_bytes(proof.subsig))
            + lp(group.g1_to_bytes(proof.subpub))
            + lp(mask_to_bytes(proof.mask)))


def decode_proof(data: bytes, group: BilinearGroup) -> AggregateProof:
    r = Reader(data)
    subsig = group.g2_from_bytes(r.lp())
    subpub = group.g1_from_bytes(r.lp())
    mask = mask_from_bytes(r.lp())
    r.done()
    return AggregateProof(subsig, subpub, mask)
