"""Protocol negotiation by exchange of length-prefixed id strings.

Every message is the UTF-8 protocol id followed by a newline, prefixed
with the byte length of id+newline as an unsigned varint. Both sides
open by sending the multistream header id without waiting; anything
else as a first message terminates the negotiation. The initiator then
proposes ids in preference order; the responder echoes a supported id
or answers "na".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import varint
from .errors import NegotiationError

MULTISTREAM_ID = "/multistream/1.0.0"
NA = "na"

PROTO_NOISE = "/noise"
PROTO_TLS = "/tls/1.0.0"
PROTO_YAMUX = "/yamux/1.0.0"
PROTO_FLOODSUB = "/floodsub/1.0.0"


def multistream_encode(protocol_id: str) -> bytes:
    """Wire form of one negotiation message."""
    if not protocol_id:
        raise NegotiationError("empty protocol id")
    if "\n" in protocol_id:
        raise NegotiationError("protocol id may not contain a newline")
    body = protocol_id.encode("utf-8") + b"\n"
    return varint.encode(len(body)) + body


def multistream_decode(message: bytes) -> str:
    """Inverse of multistream_encode; validates prefix and newline."""
    length, offset = varint.decode(message)
    body = message[offset:]
    if len(body) != length:
        raise NegotiationError(f"length prefix {length} != body {len(body)}")
    if not body.endswith(b"\n"):
        raise NegotiationError("message does not end in newline")
    return body[:-1].decode("utf-8")


@dataclass
class Transcript:
    """Every wire message of one negotiation, in order."""

    messages: list[tuple[str, bytes]] = field(default_factory=list)

    def record(self, direction: str, message: bytes) -> None:
        self.messages.append((direction, message))

    def lines(self) -> list[str]:
        return [f"{d} {m.hex()}" for d, m in self.messages]


class _Side:
    def __init__(self) -> None:
        self.outbox: list[bytes] = []
        self.result: str | None = None
        self.failure: str | None = None
        self._got_header = False

    @property
    def done(self) -> bool:
        return self.result is not None or self.failure is not None

    def _fail(self, reason: str) -> None:
        self.failure = reason

    def _take_header(self, proto: str) -> bool:
        if self._got_header:
            return False
        self._got_header = True
        if proto != MULTISTREAM_ID:
            self._fail("header")
        return True


class Initiator(_Side):
    def __init__(self, proposals: Sequence[str]) -> None:
        super().__init__()
        if not proposals:
            raise NegotiationError("no proposals")
        self._proposals = list(proposals)
        self._index = 0
        self.outbox.append(multistream_encode(MULTISTREAM_ID))

    def on_message(self, message: bytes) -> None:
        if self.done:
            return
        try:
            proto = multistream_decode(message)
        except (NegotiationError, ValueError):
            self._fail("malformed")
            return
        if self._take_header(proto):
            if not self.failure:
                self.outbox.append(multistream_encode(self._proposals[0]))
            return
        if proto == self._proposals[self._index]:
            self.result = proto
        elif proto == NA:
            self._index += 1
            if self._index >= len(self._proposals):
                self._fail("no-common-protocol")
            else:
                self.outbox.append(multistream_encode(self._proposals[self._index]))
        else:
            self._fail("unexpected-response")


class Responder(_Side):
    def __init__(self, supported: Iterable[str]) -> None:
        super().__init__()
        self._supported = set(supported)
        self.outbox.append(multistream_encode(MULTISTREAM_ID))

    def on_message(self, message: bytes) -> None:
        if self.done:
            return
        try:
            proto = multistream_decode(message)
        except (NegotiationError, ValueError):
            self._fail("malformed")
            return
        if self._take_header(proto):
            return
        if proto in self._supported:
            self.outbox.append(multistream_encode(proto))
            self.result = proto
        else:
            self.outbox.append(multistream_encode(NA))


def negotiate(
    initiator_proposals: Sequence[str], responder_supported: Iterable[str]
) -> tuple[str | None, Transcript]:
    """Run a full negotiation over an in-memory loopback.

    Returns (selected id or None, transcript of every wire message).
    """
    a = Initiator(initiator_proposals)
    b = Responder(responder_supported)
    transcript = Transcript()
    # Alternate deliveries until both sides settle; each loop drains one
    # side's pending messages into the other.
    for _ in range(64):
        progress = False
        while a.outbox:
            message = a.outbox.pop(0)
            transcript.record("A->B", message)
            b.on_message(message)
            progress = True
        while b.outbox:
            message = b.outbox.pop(0)
            transcript.record("B->A", message)
            a.on_message(message)
            progress = True
        if not progress:
            break
    if a.failure or b.failure:
        return None, transcript
    return a.result, transcript
