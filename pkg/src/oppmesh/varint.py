"""Unsigned LEB128 varints, the length-prefix encoding used on every wire."""

from __future__ import annotations


def encode(value: int) -> bytes:
    if value < 0:
        raise ValueError("varint is unsigned")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Decode a varint starting at offset; returns (value, next_offset)."""
    result = try_decode(data, offset)
    if result is None:
        raise ValueError("truncated varint")
    return result


def try_decode(data: bytes, offset: int = 0) -> tuple[int, int] | None:
    """Like decode(), but returns None when the buffer ends mid-varint."""
    value = 0
    shift = 0
    pos = offset
    while True:
        if pos >= len(data):
            return None
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise ValueError("varint too long")


def frame_record(record: bytes) -> bytes:
    """Prefix a record with its varint length."""
    return encode(len(record)) + record


class RecordReader:
    """Incremental reader of varint-length-prefixed records."""

    def __init__(self) -> None:
        self._buffer = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buffer.extend(data)
        records = []
        while True:
            decoded = try_decode(bytes(self._buffer))
            if decoded is None:
                return records
            length, pos = decoded
            if len(self._buffer) < pos + length:
                return records
            records.append(bytes(self._buffer[pos : pos + length]))
            del self._buffer[: pos + length]
