"""Flood-style publish/subscribe with duplicate suppression.

A published message is stamped (source, seqno) and handed to every
neighbor; each node that sees a message for the first time delivers it
locally when subscribed to its topic and forwards it to all neighbors
except the one it arrived from. Flooding is topic-blind by default, per
the protocol's prose; ``strict=True`` switches to forwarding only to
neighbors that announced the topic. Subscription announcements travel a
single hop.

Wire records (outer length prefixing is owned by the stream layer):

    SUB/UNSUB: kind(1) | varint topic len | topic
    MSG:       kind(1) | varint topic len | topic | varint source len
               | source | seqno(8, big-endian) | varint payload len | payload
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

from . import varint
from .errors import OppMeshError

KIND_SUB = 1
KIND_UNSUB = 2
KIND_MSG = 3

DEFAULT_SEEN_TTL_S = 120.0
DEFAULT_SEEN_CAPACITY = 4096


@dataclass(frozen=True)
class PubSubMessage:
    source: str
    seqno: int
    topic: str
    payload: bytes

    @property
    def key(self) -> tuple[str, int]:
        return (self.source, self.seqno)


def encode_record(kind: int, topic: str, message: PubSubMessage | None = None) -> bytes:
    topic_bytes = topic.encode("utf-8")
    out = bytes([kind]) + varint.encode(len(topic_bytes)) + topic_bytes
    if kind == KIND_MSG:
        if message is None:
            raise OppMeshError("MSG record requires a message")
        source = message.source.encode("utf-8")
        out += varint.encode(len(source)) + source
        out += message.seqno.to_bytes(8, "big")
        out += varint.encode(len(message.payload)) + message.payload
    return out


def decode_record(record: bytes) -> tuple[int, str, PubSubMessage | None]:
    kind = record[0]
    topic_len, pos = varint.decode(record, 1)
    topic = record[pos : pos + topic_len].decode("utf-8")
    pos += topic_len
    if kind != KIND_MSG:
        return kind, topic, None
    source_len, pos = varint.decode(record, pos)
    source = record[pos : pos + source_len].decode("utf-8")
    pos += source_len
    seqno = int.from_bytes(record[pos : pos + 8], "big")
    pos += 8
    payload_len, pos = varint.decode(record, pos)
    payload = record[pos : pos + payload_len]
    if len(payload) != payload_len:
        raise OppMeshError("truncated MSG record")
    return kind, topic, PubSubMessage(source, seqno, topic, payload)


class SeenCache:
    """(source, seqno) membership with TTL-then-LRU eviction."""

    def __init__(
        self,
        ttl_s: float = DEFAULT_SEEN_TTL_S,
        capacity: int = DEFAULT_SEEN_CAPACITY,
        clock: Callable[[], float] | None = None,
    ) -> None:
        self.ttl_s = ttl_s
        self.capacity = capacity
        self._clock = clock or time.monotonic
        self._entries: OrderedDict[tuple[str, int], float] = OrderedDict()

    def _evict(self) -> None:
        now = self._clock()
        expired = [k for k, exp in self._entries.items() if exp <= now]
        for k in expired:
            del self._entries[k]
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def check_and_add(self, key: tuple[str, int]) -> bool:
        """True if the key was new (and is now recorded)."""
        self._evict()
        if key in self._entries:
            self._entries.move_to_end(key)
            return False
        self._entries[key] = self._clock() + self.ttl_s
        return True

    def __contains__(self, key: tuple[str, int]) -> bool:
        self._evict()
        return key in self._entries

    def __len__(self) -> int:
        self._evict()
        return len(self._entries)


@dataclass
class FloodSubStats:
    published: int = 0
    delivered: int = 0
    forwarded: int = 0
    duplicates_dropped: int = 0
    per_message_forwards: dict[tuple[str, int], int] = field(default_factory=dict)


class FloodSub:
    def __init__(
        self,
        peer_id: str,
        clock: Callable[[], float] | None = None,
        strict: bool = False,
        seen_ttl_s: float = DEFAULT_SEEN_TTL_S,
        seen_capacity: int = DEFAULT_SEEN_CAPACITY,
    ) -> None:
        self.peer_id = peer_id
        self.strict = strict
        self.seen = SeenCache(seen_ttl_s, seen_capacity, clock)
        self.stats = FloodSubStats()
        self._neighbors: dict[str, Callable[[bytes], None]] = {}
        self._neighbor_topics: dict[str, set[str]] = {}
        self._subscriptions: dict[str, Callable[[PubSubMessage], None]] = {}
        self._next_seqno = 0

    # ---- membership ----

    def add_neighbor(self, peer_id: str, send: Callable[[bytes], None]) -> None:
        self._neighbors[peer_id] = send
        self._neighbor_topics.setdefault(peer_id, set())
        for topic in sorted(self._subscriptions):
            send(encode_record(KIND_SUB, topic))

    def remove_neighbor(self, peer_id: str) -> None:
        self._neighbors.pop(peer_id, None)
        self._neighbor_topics.pop(peer_id, None)

    @property
    def neighbors(self) -> list[str]:
        return sorted(self._neighbors)

    # ---- subscriptions ----

    def subscribe(self, topic: str, handler: Callable[[PubSubMessage], None]) -> None:
        announce = topic not in self._subscriptions
        self._subscriptions[topic] = handler
        if announce:
            record = encode_record(KIND_SUB, topic)
            for peer_id in self.neighbors:
                self._neighbors[peer_id](record)

    def unsubscribe(self, topic: str) -> None:
        if self._subscriptions.pop(topic, None) is not None:
            record = encode_record(KIND_UNSUB, topic)
            for peer_id in self.neighbors:
                self._neighbors[peer_id](record)

    def subscribed_topics(self) -> set[str]:
        return set(self._subscriptions)

    # ---- publish / receive ----

    def publish(self, topic: str, payload: bytes) -> PubSubMessage:
        self._next_seqno += 1
        message = PubSubMessage(self.peer_id, self._next_seqno, topic, payload)
        self.stats.published += 1
        self.seen.check_and_add(message.key)
        self._deliver_local(message)
        self._forward(message, exclude=None)
        return message

    def on_record(self, from_peer: str, record: bytes) -> None:
        kind, topic, message = decode_record(record)
        if kind == KIND_SUB:
            self._neighbor_topics.setdefault(from_peer, set()).add(topic)
        elif kind == KIND_UNSUB:
            self._neighbor_topics.setdefault(from_peer, set()).discard(topic)
        elif kind == KIND_MSG and message is not None:
            self.on_message(from_peer, message)

    def on_message(self, from_peer: str | None, message: PubSubMessage) -> None:
        if not self.seen.check_and_add(message.key):
            self.stats.duplicates_dropped += 1
            return
        self._deliver_local(message)
        self._forward(message, exclude=from_peer)

    def _deliver_local(self, message: PubSubMessage) -> None:
        handler = self._subscriptions.get(message.topic)
        if handler is not None:
            self.stats.delivered += 1
            handler(message)

    def _forward(self, message: PubSubMessage, exclude: str | None) -> None:
        record = encode_record(KIND_MSG, message.topic, message)
        for peer_id in self.neighbors:
            if peer_id == exclude:
                continue
            if self.strict and message.topic not in self._neighbor_topics.get(
                peer_id, ()
            ):
                continue
            self.stats.forwarded += 1
            counts = self.stats.per_message_forwards
            counts[message.key] = counts.get(message.key, 0) + 1
            self._neighbors[peer_id](record)
