"""Canonical byte encoding for signed payloads and wire messages.

Every value that gets signed, hashed or MACed anywhere in the system goes
through this encoding, so signatures verify bit-exactly across module
boundaries.  The format is length-prefixed field concatenation with a fixed
field order and big-endian integers:

    N                       -> b"N"
    True / False            -> b"T" / b"F"
    int (0 <= v < 2**64)    -> b"I" + 8-byte big-endian
    bytes                   -> b"B" + 4-byte big-endian length + payload
    str                     -> b"S" + 4-byte big-endian length + utf-8
    tuple / list            -> b"L" + 4-byte big-endian count + items

Tuples and lists encode identically; decoding always yields tuples so that
decoded values are hashable and immutable.
"""

from __future__ import annotations

import struct

Encodable = None | bool | int | bytes | str | tuple | list


def encode(value: Encodable) -> bytes:
    if value is None:
        return b"N"
    if value is True:
        return b"T"
    if value is False:
        return b"F"
    if isinstance(value, int):
        if not 0 <= value < 2**64:
            raise ValueError(f"integer out of encodable range: {value}")
        return b"I" + struct.pack(">Q", value)
    if isinstance(value, bytes):
        return b"B" + struct.pack(">I", len(value)) + value
    if isinstance(value, str):
        raw = value.encode("utf-8")
        return b"S" + struct.pack(">I", len(raw)) + raw
    if isinstance(value, (tuple, list)):
        body = b"".join(encode(item) for item in value)
        return b"L" + struct.pack(">I", len(value)) + body
    raise TypeError(f"cannot canonically encode {type(value).__name__}")


def decode(data: bytes) -> Encodable:
    value, offset = _decode_at(data, 0)
    if offset != len(data):
        raise ValueError("trailing bytes after canonical value")
    return value


def _decode_at(data: bytes, offset: int) -> tuple[Encodable, int]:
    if offset >= len(data):
        raise ValueError("truncated canonical value")
    tag = data[offset : offset + 1]
    offset += 1
    if tag == b"N":
        return None, offset
    if tag == b"T":
        return True, offset
    if tag == b"F":
        return False, offset
    if tag == b"I":
        (v,) = struct.unpack_from(">Q", data, offset)
        return v, offset + 8
    if tag == b"B":
        (n,) = struct.unpack_from(">I", data, offset)
        offset += 4
        if offset + n > len(data):
            raise ValueError("truncated bytes field")
        return data[offset : offset + n], offset + n
    if tag == b"S":
        (n,) = struct.unpack_from(">I", data, offset)
        offset += 4
        if offset + n > len(data):
            raise ValueError("truncated string field")
        return data[offset : offset + n].decode("utf-8"), offset + n
    if tag == b"L":
        (count,) = struct.unpack_from(">I", data, offset)
        offset += 4
        items = []
        for _ in range(count):
            item, offset = _decode_at(data, offset)
            items.append(item)
        return tuple(items), offset
    raise ValueError(f"unknown canonical tag {tag!r}")
