"""Serial frame codec for the bridge wire format.

Every message handed to the bridge is hex-encoded (uppercase) and split
into segments that each fit a 255-byte serial frame:

    HEADER(13) | DST(6) | START(2) | DATA(1-227) | [LENGTH(4) | END(3)]

The 13-byte header is:

    version(1) | msg_id(4) | seg_index(2) | seg_count(2) | data_len(2)
    | flags(1) | reserved(1)          (all integers big-endian)

LENGTH (total hex-encoded length of the whole message) and the END
marker are carried only by the final segment; flags bit 0 marks it.
DATA is restricted to the hex alphabet 0-9A-F, so the markers "<<" and
">>>" can never appear inside it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import ceil
from typing import Iterable, Iterator

from .errors import (
    FrameDecodeError,
    IncompleteMessageError,
    LengthMismatchError,
    PayloadSizeError,
)

VERSION = 1
FLAG_FINAL = 0x01

HEADER_LEN = 13
DST_LEN = 6
START_MARKER = b"<<"
END_MARKER = b">>>"
LENGTH_LEN = 4
MAX_DATA_LEN = 227
MAX_FRAME_LEN = 255
MAX_PAYLOAD_LEN = 2000

_HEADER_STRUCT = struct.Struct(">BIHHHBB")
_HEX_BYTES = frozenset(b"0123456789ABCDEF")

# Offsets within a frame.
_DST_OFF = HEADER_LEN
_START_OFF = HEADER_LEN + DST_LEN
_DATA_OFF = _START_OFF + len(START_MARKER)


def hex_encode(payload: bytes) -> bytes:
    """Uppercase hex-ASCII rendering of payload; output is 2x the input length."""
    if not payload:
        raise PayloadSizeError("payload must be non-empty")
    return payload.hex().upper().encode("ascii")


def hex_decode(data: bytes) -> bytes:
    return bytes.fromhex(data.decode("ascii"))


def frame_count(payload_len: int) -> int:
    """Number of frames a payload of the given byte length occupies."""
    return ceil(2 * payload_len / MAX_DATA_LEN)


@dataclass(frozen=True)
class MessageHeader:
    version: int
    msg_id: int
    seg_index: int
    seg_count: int
    data_len: int
    flags: int

    def pack(self) -> bytes:
        return _HEADER_STRUCT.pack(
            self.version,
            self.msg_id,
            self.seg_index,
            self.seg_count,
            self.data_len,
            self.flags,
            0,
        )

    @property
    def is_final(self) -> bool:
        return bool(self.flags & FLAG_FINAL)

    @classmethod
    def unpack(cls, data: bytes) -> "MessageHeader":
        version, msg_id, seg_index, seg_count, data_len, flags, reserved = (
            _HEADER_STRUCT.unpack(data[:HEADER_LEN])
        )
        header = cls(version, msg_id, seg_index, seg_count, data_len, flags)
        if version != VERSION:
            raise FrameDecodeError(f"unsupported version {version}")
        if reserved != 0:
            raise FrameDecodeError("reserved byte not zero")
        if flags & ~FLAG_FINAL:
            raise FrameDecodeError(f"unknown flag bits 0x{flags:02x}")
        if seg_count < 1 or seg_index >= seg_count:
            raise FrameDecodeError(f"segment index {seg_index}/{seg_count} out of range")
        if header.is_final != (seg_index == seg_count - 1):
            raise FrameDecodeError("final flag disagrees with segment index")
        if not 1 <= data_len <= MAX_DATA_LEN:
            raise FrameDecodeError(f"data length {data_len} out of range")
        return header


@dataclass(frozen=True)
class SegmentFrame:
    header: MessageHeader
    dst: bytes
    data: bytes
    total_len: int | None = None  # set on the final segment only

    @property
    def is_final(self) -> bool:
        return self.header.is_final

    def encode(self) -> bytes:
        if len(self.dst) != DST_LEN:
            raise FrameDecodeError(f"dst must be {DST_LEN} bytes")
        parts = [self.header.pack(), self.dst, START_MARKER, self.data]
        if self.is_final:
            if self.total_len is None:
                raise FrameDecodeError("final segment requires total_len")
            parts.append(self.total_len.to_bytes(LENGTH_LEN, "big"))
            parts.append(END_MARKER)
        return b"".join(parts)


def encode_message(payload: bytes, dst: bytes, msg_id: int) -> list[bytes]:
    """Hex-encode payload and split it into serialized frames for dst.

    Frames come out in segment order; concatenating their DATA fields
    reproduces the hex encoding. A single full final frame is exactly
    255 bytes.
    """
    if len(payload) > MAX_PAYLOAD_LEN:
        raise PayloadSizeError(
            f"payload is {len(payload)} bytes, limit {MAX_PAYLOAD_LEN}"
        )
    if len(dst) != DST_LEN:
        raise FrameDecodeError(f"dst must be {DST_LEN} bytes")
    hexed = hex_encode(payload)
    seg_count = ceil(len(hexed) / MAX_DATA_LEN)
    frames = []
    for index in range(seg_count):
        chunk = hexed[index * MAX_DATA_LEN : (index + 1) * MAX_DATA_LEN]
        final = index == seg_count - 1
        header = MessageHeader(
            version=VERSION,
            msg_id=msg_id & 0xFFFFFFFF,
            seg_index=index,
            seg_count=seg_count,
            data_len=len(chunk),
            flags=FLAG_FINAL if final else 0,
        )
        frame = SegmentFrame(header, dst, chunk, len(hexed) if final else None)
        frames.append(frame.encode())
    return frames


@dataclass(frozen=True)
class FrameEvent:
    """Parser diagnostics: resynchronization gaps and bad end markers."""

    kind: str  # "resync" | "end_marker_mismatch"
    detail: int  # bytes skipped, or the msg_id of the dropped frame


class _Incomplete(Exception):
    pass


class FrameStreamParser:
    """Incremental frame parser; boundary-agnostic over the input chunks.

    A bad start marker or malformed header triggers resynchronization:
    the parser scans forward one byte at a time until a structurally
    valid frame parses. Parser instances are single-caller.
    """

    def __init__(self) -> None:
        self._buffer = bytearray()
        self._skipped = 0
        self.events: list[FrameEvent] = []

    def feed(self, data: bytes) -> list[SegmentFrame]:
        self._buffer.extend(data)
        frames: list[SegmentFrame] = []
        while self._buffer:
            try:
                frame, consumed = self._parse_front()
            except _Incomplete:
                break
            except FrameDecodeError:
                del self._buffer[:1]
                self._skipped += 1
                continue
            if self._skipped:
                self.events.append(FrameEvent("resync", self._skipped))
                self._skipped = 0
            del self._buffer[:consumed]
            if frame is not None:
                frames.append(frame)
        return frames

    def _parse_front(self) -> tuple[SegmentFrame | None, int]:
        buf = self._buffer
        if len(buf) < 1:
            raise _Incomplete
        if buf[0] != VERSION:
            raise FrameDecodeError("bad version byte")
        if len(buf) < HEADER_LEN:
            raise _Incomplete
        header = MessageHeader.unpack(bytes(buf[:HEADER_LEN]))
        if len(buf) < _DATA_OFF:
            raise _Incomplete
        if bytes(buf[_START_OFF:_DATA_OFF]) != START_MARKER:
            raise FrameDecodeError("bad start marker")
        data_end = _DATA_OFF + header.data_len
        if len(buf) < data_end:
            raise _Incomplete
        data = bytes(buf[_DATA_OFF:data_end])
        if any(c not in _HEX_BYTES for c in data):
            raise FrameDecodeError("non-hex byte in data")
        dst = bytes(buf[_DST_OFF:_START_OFF])
        if not header.is_final:
            return SegmentFrame(header, dst, data), data_end
        trailer_end = data_end + LENGTH_LEN + len(END_MARKER)
        if len(buf) < trailer_end:
            raise _Incomplete
        total_len = int.from_bytes(buf[data_end : data_end + LENGTH_LEN], "big")
        if bytes(buf[data_end + LENGTH_LEN : trailer_end]) != END_MARKER:
            # Structurally complete frame with a corrupt tail: drop it
            # whole and report, rather than resyncing byte-by-byte.
            self.events.append(FrameEvent("end_marker_mismatch", header.msg_id))
            return None, trailer_end
        return SegmentFrame(header, dst, data, total_len), trailer_end


def parse_stream(chunks: Iterable[bytes]) -> Iterator[SegmentFrame]:
    """Parse an iterable of byte chunks into frames (convenience wrapper)."""
    parser = FrameStreamParser()
    for chunk in chunks:
        yield from parser.feed(chunk)


def reassemble(frames: Iterable[SegmentFrame]) -> bytes:
    """Rebuild the original payload from one message's frames.

    Callers group frames by (source, msg_id) beforehand. Missing
    segments raise IncompleteMessageError; a DATA total that disagrees
    with the final segment's LENGTH field raises LengthMismatchError.
    Integrity beyond length is deliberately not checked here; the layer
    above owns that verification.
    """
    by_index: dict[int, SegmentFrame] = {}
    seg_count = None
    total_len = None
    for frame in frames:
        by_index[frame.header.seg_index] = frame
        if seg_count is None:
            seg_count = frame.header.seg_count
        elif frame.header.seg_count != seg_count:
            raise FrameDecodeError("segment count disagrees across frames")
        if frame.is_final:
            total_len = frame.total_len
    if seg_count is None:
        raise IncompleteMessageError("no frames")
    missing = [i for i in range(seg_count) if i not in by_index]
    if missing or total_len is None:
        raise IncompleteMessageError(f"missing segments {missing or ['final']}")
    data = b"".join(by_index[i].data for i in range(seg_count))
    if len(data) != total_len:
        raise LengthMismatchError(
            f"got {len(data)} data bytes, length field says {total_len}"
        )
    return hex_decode(data)
