"""Canonical byte encoding shared by everything that gets signed or hashed.

Fields are written in a fixed order: integers big-endian at fixed width,
variable-length fields prefixed with a 4-byte big-endian length.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def u8(x: int) -> bytes:
    return int(x).to_bytes(1, "big")


def u32(x: int) -> bytes:
    return int(x).to_bytes(4, "big")


def u64(x: int) -> bytes:
    return int(x).to_bytes(8, "big")


def lp(data: bytes | str) -> bytes:
    if isinstance(data, str):
        data = data.encode()
    return u32(len(data)) + bytes(data)


def lp_list(items: list[bytes]) -> bytes:
    return u32(len(items)) + b"".join(lp(x) for x in items)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class Reader:
    """Cursor over a canonical encoding; raises ``ValueError`` on truncation."""

    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ValueError("truncated encoding")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def lp(self) -> bytes:
        return self.take(self.u32())

    def lp_str(self) -> str:
        return self.lp().decode()

    def lp_list(self) -> list[bytes]:
        return [self.lp() for _ in range(self.u32())]

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ValueError("trailing bytes in encoding")


def canonical_json(obj: Any) -> str:
    """Stable single-line JSON used for traces, reports and state roots."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(obj: Any) -> Any:
    if isinstance(obj, (bytes, bytearray)):
        return obj.hex()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if hasattr(obj, "to_json"):
        return obj.to_json()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
