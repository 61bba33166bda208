"""Minimal stream multiplexer: many ordered byte streams over one channel.

Frame layout: varint stream id, one flag byte (SYN, DATA or FIN), varint
data length, data. The opener of a connection allocates odd stream ids,
the other side even ones. Stream id 0 is reserved for connection
control (liveness probes). Windowing and flow control are out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from . import varint
from .errors import OppMeshError

FLAG_SYN = 0x01
FLAG_DATA = 0x02
FLAG_FIN = 0x04

CONTROL_STREAM_ID = 0

# Keep one mux frame (and therefore one sealed record and one bridge
# message) within the bridge's 2000-byte payload budget.
MAX_FRAME_DATA = 1800


def encode_frame(stream_id: int, flags: int, data: bytes = b"") -> bytes:
    return varint.encode(stream_id) + bytes([flags]) + varint.encode(len(data)) + data


def decode_frames(buffer: bytearray) -> list[tuple[int, int, bytes]]:
    """Consume whole frames from the front of buffer; leaves remainders."""
    frames = []
    while True:
        decoded = varint.try_decode(bytes(buffer))
        if decoded is None:
            return frames
        stream_id, pos = decoded
        if pos >= len(buffer):
            return frames
        flags = buffer[pos]
        decoded = varint.try_decode(bytes(buffer), pos + 1)
        if decoded is None:
            return frames
        length, pos = decoded
        if len(buffer) < pos + length:
            return frames
        data = bytes(buffer[pos : pos + length])
        del buffer[: pos + length]
        frames.append((stream_id, flags, data))


@dataclass
class MuxStream:
    stream_id: int
    muxer: "Muxer"
    protocol: str | None = None
    on_data: Callable[[bytes], None] | None = None
    local_closed: bool = False
    remote_closed: bool = False
    _pending: list[bytes] = field(default_factory=list)

    def write(self, data: bytes) -> None:
        if self.local_closed:
            raise OppMeshError(f"stream {self.stream_id} closed")
        for i in range(0, len(data), MAX_FRAME_DATA):
            chunk = data[i : i + MAX_FRAME_DATA]
            self.muxer.send_frame(self.stream_id, FLAG_DATA, chunk)

    def close(self) -> None:
        if not self.local_closed:
            self.local_closed = True
            self.muxer.send_frame(self.stream_id, FLAG_FIN)

    def _deliver(self, data: bytes) -> None:
        if self.on_data is not None:
            self.on_data(data)
        else:
            self._pending.append(data)

    def set_on_data(self, fn: Callable[[bytes], None]) -> None:
        self.on_data = fn
        while self._pending:
            fn(self._pending.pop(0))


class Muxer:
    def __init__(self, send_record: Callable[[bytes], None], initiator: bool) -> None:
        self._send_record = send_record
        self._next_id = 1 if initiator else 2
        self._buffer = bytearray()
        self.streams: dict[int, MuxStream] = {}
        self.on_stream: Callable[[MuxStream], None] | None = None
        self.on_control: Callable[[bytes], None] | None = None

    def open_stream(self) -> MuxStream:
        stream_id = self._next_id
        self._next_id += 2
        stream = MuxStream(stream_id, self)
        self.streams[stream_id] = stream
        self.send_frame(stream_id, FLAG_SYN)
        return stream

    def send_control(self, data: bytes) -> None:
        self.send_frame(CONTROL_STREAM_ID, FLAG_DATA, data)

    def send_frame(self, stream_id: int, flags: int, data: bytes = b"") -> None:
        self._send_record(encode_frame(stream_id, flags, data))

    def on_record(self, plaintext: bytes) -> None:
        self._buffer.extend(plaintext)
        for stream_id, flags, data in decode_frames(self._buffer):
            self._dispatch(stream_id, flags, data)

    def _dispatch(self, stream_id: int, flags: int, data: bytes) -> None:
        if stream_id == CONTROL_STREAM_ID:
            if flags & FLAG_DATA and self.on_control is not None:
                self.on_control(data)
            return
        stream = self.streams.get(stream_id)
        if flags & FLAG_SYN:
            if stream is None:
                stream = MuxStream(stream_id, self)
                self.streams[stream_id] = stream
                if self.on_stream is not None:
                    self.on_stream(stream)
            return
        if stream is None:
            return  # data for an unknown stream: drop
        if flags & FLAG_DATA:
            stream._deliver(data)
        if flags & FLAG_FIN:
            stream.remote_closed = True
