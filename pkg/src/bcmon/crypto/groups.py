"""Bilinear groups used for relay attestation.

Two instantiations share one method-based interface:

* :class:`Bls12381Group` -- BLS12-381 (~128-bit security). Group arithmetic and
  pairings come from ``py_arkworks_bls12381``; hash-to-G2 is the RFC 9380
  SSWU construction exposed by ``blspy``. Both libraries use the zcash
  compressed encoding, so points cross between them as bytes.
* :class:`ToyGroup` -- ``G1 = G2 = Z_q`` with ``e(a, b) = h^(a*b) mod p``.
  Bilinear and non-degenerate but with trivial discrete logs. It exists so
  that protocol-logic simulations with thousands of attestations run fast;
  never use it where unforgeability matters.

Elements are opaque to callers. Scalars are plain Python ints.
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from typing import Any, Sequence

BLS12_381_ORDER = 0x73EDA753299D7D483339D80809A1D80553BDA402FFFE5BFEFFFFFFFF00000001


class BilinearGroup(ABC):
    """Asymmetric pairing ``e: G1 x G2 -> GT`` with prime order ``order``."""

    name: str
    order: int

    @property
    @abstractmethod
    def g1(self) -> Any: ...

    @property
    @abstractmethod
    def g2(self) -> Any: ...

    @abstractmethod
    def g1_mul(self, point: Any, k: int) -> Any: ...

    @abstractmethod
    def g2_mul(self, point: Any, k: int) -> Any: ...

    @abstractmethod
    def g1_add(self, a: Any, b: Any) -> Any: ...

    @abstractmethod
    def g2_add(self, a: Any, b: Any) -> Any: ...

    @abstractmethod
    def g1_neg(self, point: Any) -> Any: ...

    @abstractmethod
    def g1_identity(self) -> Any: ...

    @abstractmethod
    def g2_identity(self) -> Any: ...

    @abstractmethod
    def pair(self, p: Any, q: Any) -> Any: ...

    @abstractmethod
    def gt_mul(self, a: Any, b: Any) -> Any: ...

    @abstractmethod
    def gt_one(self) -> Any: ...

    @abstractmethod
    def hash_to_g2(self, message: bytes) -> Any: ...

    @abstractmethod
    def g1_to_bytes(self, point: Any) -> bytes: ...

    @abstractmethod
    def g1_from_bytes(self, data: bytes) -> Any:
        """Decode and subgroup-check; raises ``ValueError`` on malformed input."""

    @abstractmethod
    def g2_to_bytes(self, point: Any) -> bytes: ...

    @abstractmethod
    def g2_from_bytes(self, data: bytes) -> Any:
        """Decode and subgroup-check; raises ``ValueError`` on malformed input."""

    def multi_pair(self, ps: Sequence[Any], qs: Sequence[Any]) -> Any:
        acc = self.gt_one()
        for p, q in zip(ps, qs):
            acc = self.gt_mul(acc, self.pair(p, q))
        return acc

    def pairings_cancel(self, ps: Sequence[Any], qs: Sequence[Any]) -> bool:
        """``prod e(p_i, q_i) == 1``."""
        return self.multi_pair(ps, qs) == self.gt_one()

    def gt_pow(self, x: Any, k: int) -> Any:
        k %= self.order
        acc = self.gt_one()
        base = x
        while k:
            if k & 1:
                acc = self.gt_mul(acc, base)
            base = self.gt_mul(base, base)
            k >>= 1
        return acc

    def g1_eq(self, a: Any, b: Any) -> bool:
        return self.g1_to_bytes(a) == self.g1_to_bytes(b)

    def g2_eq(self, a: Any, b: Any) -> bool:
        return self.g2_to_bytes(a) == self.g2_to_bytes(b)

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name}>"


class Bls12381Group(BilinearGroup):
    name = "bls12-381"
    order = BLS12_381_ORDER
    # hash-to-curve domain separation tag for relay attestations
    DST = b"BCMON-RELAY-ATTEST_BLS12381G2_XMD:SHA-256_SSWU_RO_"

    def __init__(self) -> None:
        import blspy
        from py_arkworks_bls12381 import GT, G1Point, G2Point, Scalar

        self._blspy = blspy
        self._G1, self._G2, self._GT, self._Scalar = G1Point, G2Point, GT, Scalar
        self._g1 = G1Point()
        self._g2 = G2Point()

    @property
    def g1(self):
        return self._g1

    @property
    def g2(self):
        return self._g2

    def g1_mul(self, point, k):
        return point * self._Scalar(k % self.order)

    def g2_mul(self, point, k):
        return point * self._Scalar(k % self.order)

    def g1_add(self, a, b):
        return a + b

    def g2_add(self, a, b):
        return a + b

    def g1_neg(self, point):
        return -point

    def g1_identity(self):
        return self._G1.identity()

    def g2_identity(self):
        return self._G2.identity()

    def pair(self, p, q):
        return self._GT.pairing(p, q)

    def multi_pair(self, ps, qs):
        if not ps:
            return self.gt_one()
        return self._GT.multi_pairing(list(ps), list(qs))

    def gt_mul(self, a, b):
        return a * b

    def gt_one(self):
        return self._GT.one()

    def hash_to_g2(self, message: bytes):
        h = self._blspy.G2Element.from_message(bytes(message), self.DST)
        return self._G2.from_compressed_bytes_unchecked(bytes(h))

    def g1_to_bytes(self, point) -> bytes:
        return bytes(point.to_compressed_bytes())

    def g1_from_bytes(self, data: bytes):
        if len(data) != 48:
            raise ValueError("G1 encoding must be 48 bytes")
        try:
            point = self._G1.from_compressed_bytes(list(data))
        except ValueError as exc:
            raise ValueError(f"malformed G1 point: {exc}") from None
        # arkworks ignores the payload bits of an infinity-flagged encoding
        if bytes(point.to_compressed_bytes()) != bytes(data):
            raise ValueError("non-canonical G1 encoding")
        return point

    def g2_to_bytes(self, point) -> bytes:
        return bytes(point.to_compressed_bytes())

    def g2_from_bytes(self, data: bytes):
        if len(data) != 96:
            raise ValueError("G2 encoding must be 96 bytes")
        try:
            point = self._G2.from_compressed_bytes(list(data))
        except ValueError as exc:
            raise ValueError(f"malformed G2 point: {exc}") from None
        if bytes(point.to_compressed_bytes()) != bytes(data):
            raise ValueError("non-canonical G2 encoding")
        return point

    def g1_eq(self, a, b) -> bool:
        return a == b

    def g2_eq(self, a, b) -> bool:
        return a == b


class ToyGroup(BilinearGroup):
    """Insecure bilinear group for fast protocol simulation.

    ``q`` is prime, ``p = 6q + 1`` is prime and ``h = 64`` generates the
    order-``q`` subgroup of ``Z_p^*``. Points in G1 and G2 are residues mod
    ``q`` (written additively); GT elements are residues mod ``p``.
    """

    name = "toy"
    Q = 2305843009213693967
    P = 13835058055282163803
    H = 64
    order = Q
    _WIDTH = 8

    @property
    def g1(self) -> int:
        return 1

    @property
    def g2(self) -> int:
        return 1

    def g1_mul(self, point, k):
        return point * k % self.Q

    g2_mul = g1_mul

    def g1_add(self, a, b):
        return (a + b) % self.Q

    g2_add = g1_add

    def g1_neg(self, point):
        return -point % self.Q

    def g1_identity(self):
        return 0

    g2_identity = g1_identity

    def pair(self, p, q):
        return pow(self.H, p * q % self.Q, self.P)

    def gt_mul(self, a, b):
        return a * b % self.P

    def gt_one(self):
        return 1

    def hash_to_g2(self, message: bytes) -> int:
        ctr = 0
        while True:
            d = hashlib.sha256(b"toy-h2g2" + ctr.to_bytes(4, "big") + bytes(message)).digest()
            v = int.from_bytes(d, "big") % self.Q
            if v:
                return v
            ctr += 1

    def _to_bytes(self, x: int) -> bytes:
        return int(x).to_bytes(self._WIDTH, "big")

    def _from_bytes(self, data: bytes) -> int:
        if len(data) != self._WIDTH:
            raise ValueError(f"toy point encoding must be {self._WIDTH} bytes")
        v = int.from_bytes(data, "big")
        if v >= self.Q:
            raise ValueError("toy point out of range")
        return v

    g1_to_bytes = g2_to_bytes = _to_bytes
    g1_from_bytes = g2_from_bytes = _from_bytes

    def g1_eq(self, a, b) -> bool:
        return a == b

    g2_eq = g1_eq


_GROUPS: dict[str, BilinearGroup] = {}


def get_group(name: str = "bls12-381") -> BilinearGroup:
    """Return the shared group instance registered under ``name``."""
    if name not in _GROUPS:
        if name == "bls12-381":
            _GROUPS[name] = Bls12381Group()
        elif name == "toy":
            _GROUPS[name] = ToyGroup()
        else:
            raise ValueError(f"unknown bilinear group {name!r}")
    return _GROUPS[name]
