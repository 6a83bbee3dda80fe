"""Offline-client keys: Ed25519 (deterministic nonces) and hashed addresses."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat


def address_of(pk: bytes) -> str:
    return "0x" + hashlib.sha256(b"bcmon-addr" + pk).digest()[:20].hex()


@dataclass(frozen=True)
class ClientKeyPair:
    sk: bytes = field(repr=False)
    pk: bytes
    address: str
    _key: Ed25519PrivateKey = field(repr=False, compare=False)


def client_keygen(seed: int | bytes | str) -> ClientKeyPair:
    if isinstance(seed, int):
        seed = seed.to_bytes((seed.bit_length() + 8) // 8, "big", signed=True)
    elif isinstance(seed, str):
        seed = seed.encode()
    sk = hashlib.sha256(b"bcmon-client-key" + seed).digest()
    key = Ed25519PrivateKey.from_private_bytes(sk)
    pk = key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return ClientKeyPair(sk, pk, address_of(pk), key)


def client_sign(kp: ClientKeyPair, message: bytes) -> bytes:
    return kp._key.sign(bytes(message))


@lru_cache(maxsize=4096)
def _public_key(pk: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(pk)


def client_verify(pk: bytes, message: bytes, signature: bytes) -> bool:
    try:
        _public_key(bytes(pk)).verify(bytes(signature), bytes(message))
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True
