"""Bridge between the p2p host and the serial mesh transport.

Outbound messages are framed by the codec and written to the port with a
configurable inter-segment delay (default 60 ms) so the radio channel is
not saturated. Inbound bytes are parsed incrementally and reassembled
per (source, msg_id); messages whose declared length disagrees with the
collected data are discarded with an error event, and stale partial
messages are evicted after a timeout.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from . import frame_codec
from .errors import LengthMismatchError, TransportError
from .frame_codec import FrameStreamParser, SegmentFrame, encode_message
from .mesh import MeshAddress
from .sim import SimEvent, Simulator, ms

logger = logging.getLogger(__name__)

DEFAULT_INTER_SEGMENT_DELAY_MS = 60
DEFAULT_REASSEMBLY_TIMEOUT_MS = 10_000
DEFAULT_BAUD = 115200


@dataclass
class BridgeConfig:
    inter_segment_delay_ms: float = DEFAULT_INTER_SEGMENT_DELAY_MS
    reassembly_timeout_ms: float = DEFAULT_REASSEMBLY_TIMEOUT_MS


@dataclass
class BridgeEvent:
    kind: str  # length_mismatch | timeout | duplicate_mismatch | frame_error
    source: int | None
    msg_id: int | None
    detail: str = ""


@dataclass
class BridgeSendHandle:
    msg_id: int
    frame_count: int
    sent_at: int | None = None  # set when the last byte is written
    first_write_at: int | None = None
    _callbacks: list[Callable[["BridgeSendHandle"], None]] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.sent_at is not None

    def on_sent(self, fn: Callable[["BridgeSendHandle"], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)


class PipePort:
    """In-memory duplex byte port for the simulator.

    Serial transfer time is not modeled; pacing comes from the bridge's
    inter-segment delay, which dominates at the baud rates involved.
    """

    def __init__(self, sim: Simulator) -> None:
        self._sim = sim
        self.closed = False
        self.receiver: Callable[[bytes], None] | None = None
        self.written: list[tuple[int, bytes]] = []  # (at_us, data)

    def write(self, data: bytes) -> None:
        if self.closed:
            raise TransportError("port closed")
        self.written.append((self._sim.now, data))
        if self.receiver is not None:
            self._sim.call_later(0, lambda d=data: self.receiver(d))

    def close(self) -> None:
        self.closed = True


class SerialBytePort:
    """OS serial device binding (optional, requires pyserial).

    Configuration keys: ``port`` (device path) and ``baud`` (default
    115200). Reads are pumped on a daemon thread into the receiver
    callback; this binding is for real hardware and is not exercised by
    the simulator.
    """

    def __init__(self, port: str, baud: int = DEFAULT_BAUD) -> None:
        try:
            import serial  # type: ignore[import-not-found]
        except ImportError as exc:  # pragma: no cover - optional extra
            raise TransportError(
                "pyserial is required for OS serial ports; install oppmesh[serial]"
            ) from exc
        self._serial = serial.Serial(port, baudrate=baud, timeout=0.05)
        self.closed = False
        self.receiver: Callable[[bytes], None] | None = None
        import threading

        self._thread = threading.Thread(target=self._pump, daemon=True)
        self._thread.start()

    def _pump(self) -> None:  # pragma: no cover - hardware path
        while not self.closed:
            data = self._serial.read(4096)
            if data and self.receiver is not None:
                self.receiver(data)

    def write(self, data: bytes) -> None:  # pragma: no cover - hardware path
        if self.closed:
            raise TransportError("port closed")
        self._serial.write(data)

    def close(self) -> None:  # pragma: no cover - hardware path
        self.closed = True
        self._serial.close()


@dataclass
class _Partial:
    frames: dict[int, SegmentFrame] = field(default_factory=dict)
    started_at: int = 0
    timeout_event: SimEvent | None = None


class Bridge:
    """One bridge per node: paced frame egress plus stream reassembly."""

    def __init__(
        self,
        port,
        scheduler: Simulator,
        config: BridgeConfig | None = None,
    ) -> None:
        self.port = port
        self.sched = scheduler
        self.config = config or BridgeConfig()
        self.on_message: Callable[[bytes, int | None], None] | None = None
        self.on_event: Callable[[BridgeEvent], None] | None = None
        self.events: list[BridgeEvent] = []
        self._next_msg_id = 0
        self._out: deque[tuple[bytes, BridgeSendHandle, bool]] = deque()
        self._last_write_at: int | None = None
        self._write_scheduled = False
        self._parsers: dict[int | None, FrameStreamParser] = {}
        self._partial: dict[tuple[int | None, int], _Partial] = {}
        self.frames_sent = 0
        self.messages_delivered = 0

    # ---- egress ----

    def set_inter_segment_delay(self, delay_ms: float) -> None:
        if delay_ms < 0:
            raise ValueError("delay must be >= 0")
        self.config.inter_segment_delay_ms = delay_ms

    def send(self, payload: bytes, dst: bytes | MeshAddress) -> BridgeSendHandle:
        if self.port.closed:
            raise TransportError("port closed")
        if isinstance(dst, MeshAddress):
            dst = dst.to_device_bytes()
        msg_id = self._next_msg_id
        self._next_msg_id = (self._next_msg_id + 1) & 0xFFFFFFFF
        frames = encode_message(payload, dst, msg_id)
        handle = BridgeSendHandle(msg_id, len(frames))
        for i, frame in enumerate(frames):
            self._out.append((frame, handle, i == len(frames) - 1))
        self._schedule_write()
        return handle

    def _schedule_write(self) -> None:
        if self._write_scheduled or not self._out:
            return
        delay_us = ms(self.config.inter_segment_delay_ms)
        if self._last_write_at is None:
            due = self.sched.now
        else:
            due = max(self.sched.now, self._last_write_at + delay_us)
        self._write_scheduled = True
        self.sched.schedule_at(due, self._write_next)

    def _write_next(self) -> None:
        self._write_scheduled = False
        if not self._out:
            return
        frame, handle, is_last = self._out.popleft()
        if self.port.closed:
            self._fail_egress()
            return
        self.port.write(frame)
        self.frames_sent += 1
        self._last_write_at = self.sched.now
        if handle.first_write_at is None:
            handle.first_write_at = self.sched.now
        if is_last:
            handle.sent_at = self.sched.now
            for fn in handle._callbacks:
                fn(handle)
            handle._callbacks.clear()
        self._schedule_write()

    def _fail_egress(self) -> None:
        self._out.clear()
        self._emit(BridgeEvent("transport", None, None, "port closed"))

    # ---- ingress ----

    def on_bytes(self, data: bytes, source: int | None = None) -> None:
        """Feed received serial bytes; source tags the originating mesh
        address when the binding can provide it."""
        parser = self._parsers.get(source)
        if parser is None:
            parser = self._parsers[source] = FrameStreamParser()
        frames = parser.feed(data)
        while parser.events:
            event = parser.events.pop(0)
            self._emit(BridgeEvent("frame_error", source, None, event.kind))
        for frame in frames:
            self._on_frame(frame, source)

    def _on_frame(self, frame: SegmentFrame, source: int | None) -> None:
        key = (source, frame.header.msg_id)
        entry = self._partial.get(key)
        if entry is None:
            entry = self._partial[key] = _Partial(started_at=self.sched.now)
            entry.timeout_event = self.sched.call_later(
                ms(self.config.reassembly_timeout_ms), lambda k=key: self._expire(k)
            )
        index = frame.header.seg_index
        existing = entry.frames.get(index)
        if existing is not None:
            if existing.data != frame.data:
                self._drop(key, "duplicate_mismatch")
                return
            # Identical retransmission: last write wins, nothing changes.
        entry.frames[index] = frame
        counts = {f.header.seg_count for f in entry.frames.values()}
        if len(counts) != 1:
            self._drop(key, "duplicate_mismatch")
            return
        seg_count = counts.pop()
        if len(entry.frames) == seg_count:
            self._complete(key, entry, source)

    def _complete(self, key, entry: _Partial, source: int | None) -> None:
        try:
            payload = frame_codec.reassemble(entry.frames.values())
        except LengthMismatchError as exc:
            self._drop(key, "length_mismatch", str(exc))
            return
        self._forget(key)
        self.messages_delivered += 1
        if self.on_message is not None:
            self.on_message(payload, source)

    def _expire(self, key) -> None:
        if key in self._partial:
            del self._partial[key]
            self._emit(BridgeEvent("timeout", key[0], key[1]))

    def _drop(self, key, kind: str, detail: str = "") -> None:
        self._forget(key)
        self._emit(BridgeEvent(kind, key[0], key[1], detail))

    def _forget(self, key) -> None:
        entry = self._partial.pop(key, None)
        if entry is not None and entry.timeout_event is not None:
            entry.timeout_event.cancel()

    def _emit(self, event: BridgeEvent) -> None:
        logger.debug("bridge event: %s", event)
        self.events.append(event)
        if self.on_event is not None:
            self.on_event(event)
