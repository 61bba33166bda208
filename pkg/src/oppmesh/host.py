"""Peer-to-peer host: identity, routing table, connection upgrade, and
the pub/sub wiring on top of the bridge.

A connection between two hosts moves through ordered phases: peer ids
are exchanged over the bridge, a security protocol is negotiated with
multistream-select, the two-message handshake seals the channel, the
stream multiplexer is negotiated inside the sealed channel, and finally
the pub/sub protocol is negotiated on the first stream. The initiator
then probes liveness every ``keep_alive_s``; the probe occupies the
send path for one round trip, so queued traffic behind it is delayed.

Everything on the connection byte stream is a varint-length-prefixed
record; multistream-select messages already have that shape on the wire.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable

from . import multistream, varint
from .bridge import Bridge
from .errors import (
    ConnectionFailed,
    HandshakeError,
    NegotiationError,
    PeerLookupError,
    SecureChannelError,
)
from .mesh import MeshAddress, MeshClient
from .multistream import PROTO_FLOODSUB, PROTO_NOISE, PROTO_TLS, PROTO_YAMUX
from .mux import Muxer, MuxStream
from .pubsub import FloodSub
from .secure import (
    HandshakeInitiator,
    HandshakeResponder,
    SecureChannel,
    StaticKeypair,
    peer_id_from_public_key,
)
from .sim import Simulator, seconds

logger = logging.getLogger(__name__)

# Bridge payload type tags (first byte of every bridge message). The
# second byte is the connect-attempt generation, so records from a
# superseded attempt are recognizably stale.
MSG_HELLO = 0x02
MSG_HELLO_ACK = 0x03
MSG_DIAL = 0x04
MSG_DIAL_ACK = 0x05
MSG_CONN = 0x06

# Connection phases, in their one-way order.
IDLE = "idle"
PEER_EXCHANGED = "peer_exchanged"
MULTISTREAM_AGREED = "multistream_agreed"
SECURED = "secured"
MUXED = "muxed"
READY = "ready"
FAILED = "failed"
_PHASE_ORDER = [IDLE, PEER_EXCHANGED, MULTISTREAM_AGREED, SECURED, MUXED, READY]

PING = b"\x01" + bytes(31)
PONG = b"\x02" + bytes(31)

DEFAULT_KEEP_ALIVE_S = 540.0
_STAGE_TIMEOUT_S = 20.0
_STAGE_RETRIES = 2


@dataclass
class RoutingEntry:
    address: MeshAddress
    learned_at: int


class RoutingTable:
    """Peer id to mesh client address map, refreshed by discovery."""

    def __init__(self) -> None:
        self.entries: dict[str, RoutingEntry] = {}

    def update(self, peer_id: str, address: MeshAddress, now: int) -> None:
        self.entries[peer_id] = RoutingEntry(address, now)

    def lookup(self, peer_id: str) -> MeshAddress | None:
        entry = self.entries.get(peer_id)
        return entry.address if entry else None

    def peers(self) -> list[str]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, peer_id: str) -> bool:
        return peer_id in self.entries


class Connection:
    def __init__(self, host: "Host", remote_peer_id: str, remote_addr: MeshAddress,
                 initiator: bool, generation: int = 0) -> None:
        self.host = host
        self.remote_peer_id = remote_peer_id
        self.remote_addr = remote_addr
        self.initiator = initiator
        self.generation = generation
        self.phase = IDLE
        self.failed_stage: str | None = None
        self.selected_security: str | None = None
        self.selected_muxer: str | None = None
        self.session_key: bytes | None = None
        self.channel: SecureChannel | None = None
        self.muxer: Muxer | None = None
        self.pubsub_stream: MuxStream | None = None
        self._reader = varint.RecordReader()
        self._stage = "dial"
        self._neg: multistream.Initiator | multistream.Responder | None = None
        self._handshake = None
        self._stream_negs: dict[int, multistream.Responder | multistream.Initiator] = {}
        self._stream_readers: dict[int, varint.RecordReader] = {}
        self._outbox: list[tuple] = []
        self._pre_upgrade: list[bytes] = []
        self.awaiting_pong = False
        self.pings_sent = 0
        self.attempts_left = 0
        self._watchdog = None

    # ---- phase bookkeeping ----

    def _advance(self, phase: str) -> None:
        if self.phase == FAILED:
            return
        if _PHASE_ORDER.index(phase) < _PHASE_ORDER.index(self.phase):
            raise ConnectionFailed(f"phase regression {self.phase} -> {phase}")
        self.phase = phase

    def _fail(self, stage: str) -> None:
        if self.phase == FAILED:
            return
        logger.debug("%s -> %s failed at %s", self.host.peer_id[:8],
                     self.remote_peer_id[:8], stage)
        self.phase = FAILED
        self.failed_stage = stage
        self._cancel_watchdog()
        if self.host.on_conn_failed is not None:
            self.host.on_conn_failed(self, stage)

    @property
    def ready(self) -> bool:
        return self.phase == READY

    # ---- raw record plumbing ----

    def _send_raw(self, record_bytes: bytes) -> None:
        """record_bytes must already carry its varint length prefix."""
        self.host._send_tagged(self.remote_addr, MSG_CONN, record_bytes)

    def _send_framed(self, record: bytes) -> None:
        self._send_raw(varint.frame_record(record))

    def _send_sealed(self, plaintext: bytes) -> None:
        self._send_framed(self.channel.seal(plaintext))

    def _flush_neg(self) -> None:
        while self._neg.outbox:
            message = self._neg.outbox.pop(0)
            if self._stage == "mux-neg":
                self._send_sealed(message)
            else:
                self._send_raw(message)  # multistream bytes are already framed

    # ---- connect watchdog (initiator side) ----

    def _arm_watchdog(self) -> None:
        """Restart the whole connect attempt if not Ready in time.

        A lost control message at any pre-Ready stage would otherwise
        stall the upgrade forever; the transport below retries segments
        but not whole frames.
        """
        self._cancel_watchdog()

        def fire() -> None:
            if self.phase in (FAILED, READY):
                return
            self.host._retry_connect(self)

        self._watchdog = self.host.sim.call_later(seconds(_STAGE_TIMEOUT_S), fire)

    def _cancel_watchdog(self) -> None:
        if self._watchdog is not None:
            self._watchdog.cancel()
            self._watchdog = None

    # ---- upgrade state machine ----

    def begin_upgrade(self) -> None:
        """Start the security negotiation (both roles)."""
        self._stage = "security"
        if self.initiator:
            self._neg = multistream.Initiator([PROTO_TLS, PROTO_NOISE])
        else:
            self._neg = multistream.Responder(self.host.security_supported)
        self._flush_neg()
        pending, self._pre_upgrade = self._pre_upgrade, []
        for data in pending:
            self.on_conn_bytes(data)

    def on_conn_bytes(self, data: bytes) -> None:
        if self.phase == FAILED:
            return
        if self._stage == "dial":
            # Upgrade records can outrun the dial acknowledgment; hold
            # them until begin_upgrade runs.
            self._pre_upgrade.append(data)
            return
        for record in self._reader.feed(data):
            self._on_record(record)
            if self.phase == FAILED:
                return

    def _on_record(self, record: bytes) -> None:
        stage = self._stage
        if stage == "security":
            self._on_security_record(record)
        elif stage == "handshake":
            self._on_handshake_record(record)
        else:
            self._on_sealed_record(record)

    def _on_security_record(self, record: bytes) -> None:
        self._neg.on_message(varint.frame_record(record))
        self._flush_neg()
        if self._neg.failure:
            self._fail("security")
            return
        if self._neg.result is None:
            return
        self.selected_security = self._neg.result
        self._advance(MULTISTREAM_AGREED)
        self._stage = "handshake"
        if self.initiator:
            self._handshake = HandshakeInitiator(self.host.static, self.host.rng)
            self._send_framed(self._handshake.message1())
        else:
            self._handshake = HandshakeResponder(self.host.static, self.host.rng)

    def _on_handshake_record(self, record: bytes) -> None:
        try:
            if self.initiator:
                keys = self._handshake.on_message2(record)
            else:
                msg2, keys = self._handshake.on_message1(record)
                self._send_framed(msg2)
        except HandshakeError:
            self._fail("handshake")
            return
        self.channel = SecureChannel(keys)
        self.session_key = keys.secret
        self._advance(SECURED)
        self._stage = "mux-neg"
        if self.initiator:
            self._neg = multistream.Initiator([PROTO_YAMUX])
        else:
            self._neg = multistream.Responder(self.host.muxer_supported)
        self._flush_neg()

    def _on_sealed_record(self, record: bytes) -> None:
        try:
            plaintext = self.channel.open(record)
        except SecureChannelError:
            self._fail("secure-channel")
            return
        if self._stage == "mux-neg":
            # The sealed plaintext is one complete multistream message.
            self._neg.on_message(plaintext)
            self._flush_neg()
            if self._neg.failure:
                self._fail("muxer")
            elif self._neg.result is not None:
                self._finish_mux(self._neg.result)
            return
        self.muxer.on_record(plaintext)

    def _finish_mux(self, selected: str) -> None:
        self.selected_muxer = selected
        self._advance(MUXED)
        self._stage = "mux"
        self.muxer = Muxer(self._send_sealed, initiator=self.initiator)
        self.muxer.on_control = self._on_control
        self.muxer.on_stream = self._on_inbound_stream
        if self.initiator:
            self.open_stream(PROTO_FLOODSUB, self._pubsub_stream_ready)

    # ---- streams ----

    def open_stream(
        self, protocol_id: str, on_negotiated: Callable[[MuxStream], None]
    ) -> MuxStream:
        if self.phase not in (MUXED, READY):
            raise ConnectionFailed(f"cannot open stream in phase {self.phase}")
        stream = self.muxer.open_stream()
        neg = multistream.Initiator([protocol_id])
        self._attach_stream(stream, neg, on_negotiated)
        return stream

    def _on_inbound_stream(self, stream: MuxStream) -> None:
        neg = multistream.Responder(self.host.stream_supported)

        def negotiated(s: MuxStream) -> None:
            if s.protocol == PROTO_FLOODSUB:
                self._pubsub_stream_ready(s)

        self._attach_stream(stream, neg, negotiated)

    def _attach_stream(
        self, stream: MuxStream, neg, on_negotiated: Callable[[MuxStream], None]
    ) -> None:
        """Run per-stream protocol negotiation, then dispatch records."""
        self._stream_negs[stream.stream_id] = neg
        reader = self._stream_readers[stream.stream_id] = varint.RecordReader()
        self._drain_stream_neg(stream, neg)

        def on_data(data: bytes) -> None:
            for record in reader.feed(data):
                if stream.protocol is None:
                    neg.on_message(varint.frame_record(record))
                    self._drain_stream_neg(stream, neg)
                    if neg.failure:
                        self._fail("stream-negotiation")
                        return
                    if neg.result is not None:
                        stream.protocol = neg.result
                        on_negotiated(stream)
                else:
                    self.host._on_stream_record(self, stream, record)

        stream.set_on_data(on_data)

    def _drain_stream_neg(self, stream: MuxStream, neg) -> None:
        while neg.outbox:
            stream.write(neg.outbox.pop(0))

    def _pubsub_stream_ready(self, stream: MuxStream) -> None:
        self.pubsub_stream = stream
        self._cancel_watchdog()
        self._advance(READY)
        self.host._on_conn_ready(self)

    # ---- outbound data and keep-alive gating ----

    def enqueue_record(self, record: bytes) -> None:
        """Queue a pub/sub record for the negotiated stream."""
        self._outbox.append(("data", record))
        self._pump()

    def enqueue_ping(self) -> None:
        self._outbox.append(("ping",))
        self._pump()

    def _pump(self) -> None:
        if not self.ready:
            return
        while self._outbox and not self.awaiting_pong:
            entry = self._outbox.pop(0)
            if entry[0] == "data":
                self.pubsub_stream.write(varint.frame_record(entry[1]))
            else:
                self.awaiting_pong = True
                self.pings_sent += 1
                self.muxer.send_control(PING)

    def _on_control(self, data: bytes) -> None:
        if data == PING:
            self.muxer.send_control(PONG)
        elif data == PONG:
            self.awaiting_pong = False
            self._pump()


class Host:
    def __init__(
        self,
        sim: Simulator,
        bridge: Bridge,
        mesh_client: MeshClient,
        rng: random.Random,
        keep_alive_s: float = DEFAULT_KEEP_ALIVE_S,
        strict_floodsub: bool = False,
    ) -> None:
        self.sim = sim
        self.bridge = bridge
        self.mesh_client = mesh_client
        self.rng = rng
        self.keep_alive_s = keep_alive_s
        self.static = StaticKeypair.generate(rng)
        self.peer_id = peer_id_from_public_key(self.static.public_bytes)
        self.routing = RoutingTable()
        self.pubsub = FloodSub(
            self.peer_id, clock=lambda: sim.now / 1e6, strict=strict_floodsub
        )
        self.connections: dict[str, Connection] = {}
        self._conns_by_addr: dict[int, Connection] = {}
        self.security_supported = {PROTO_NOISE}
        self.muxer_supported = {PROTO_YAMUX}
        self.stream_supported = {PROTO_FLOODSUB}
        self.on_peer_discovered: Callable[[str], None] | None = None
        self.on_conn_ready: Callable[[Connection], None] | None = None
        self.on_conn_failed: Callable[[Connection, str], None] | None = None
        self._keepalive_event = None
        self._stopped = False

        mesh_client.peer_label = self.peer_id
        mesh_client.on_discovery = self._on_discovery
        bridge.on_message = self._on_bridge_message

    # ---- discovery ----

    def announce_presence(self) -> None:
        self.mesh_client.broadcast_presence()

    def _on_discovery(self, peer_label: str, src: int) -> None:
        self.routing.update(peer_label, MeshAddress(src), self.sim.now)
        if self.on_peer_discovered is not None:
            self.on_peer_discovered(peer_label)

    # ---- connecting ----

    def connect_to_peer(self, remote_peer_id: str) -> Connection:
        """Dial a discovered peer; completion is reported via on_conn_ready."""
        address = self.routing.lookup(remote_peer_id)
        if address is None:
            raise PeerLookupError(f"peer {remote_peer_id} not in routing table")
        existing = self.connections.get(remote_peer_id)
        if existing is not None and existing.phase != FAILED:
            return existing
        return self._start_attempt(remote_peer_id, address, _STAGE_RETRIES)

    def _start_attempt(
        self, remote_peer_id: str, address: MeshAddress, attempts_left: int
    ) -> Connection:
        conn = Connection(self, remote_peer_id, address, initiator=True)
        conn.attempts_left = attempts_left
        self.connections[remote_peer_id] = conn
        self._conns_by_addr[address.value] = conn
        self._send_tagged(address, MSG_HELLO, self.peer_id.encode())
        conn._arm_watchdog()
        return conn

    def _retry_connect(self, conn: Connection) -> None:
        attempts_left = getattr(conn, "attempts_left", 0)
        if attempts_left <= 0:
            conn._fail("connect")
            return
        logger.debug(
            "%s: restarting connect to %s (%d attempts left)",
            self.peer_id[:8], conn.remote_peer_id[:8], attempts_left,
        )
        self._start_attempt(conn.remote_peer_id, conn.remote_addr, attempts_left - 1)

    def _send_tagged(self, addr: MeshAddress, tag: int, payload: bytes) -> None:
        self.bridge.send(bytes([tag]) + payload, addr)

    # ---- inbound dispatch ----

    def _on_bridge_message(self, payload: bytes, source: int | None) -> None:
        if not payload or source is None:
            return
        tag, body = payload[0], payload[1:]
        addr = MeshAddress(source)
        if tag == MSG_HELLO:
            peer_id = body.decode("utf-8")
            self.routing.update(peer_id, addr, self.sim.now)
            self._send_tagged(addr, MSG_HELLO_ACK, self.peer_id.encode())
            conn = self._conns_by_addr.get(source)
            if conn is None or conn.phase == FAILED:
                conn = Connection(self, peer_id, addr, initiator=False)
                self.connections[peer_id] = conn
                self._conns_by_addr[source] = conn
        elif tag == MSG_HELLO_ACK:
            peer_id = body.decode("utf-8")
            self.routing.update(peer_id, addr, self.sim.now)
            conn = self._conns_by_addr.get(source)
            if conn is not None and conn.initiator and conn.phase == IDLE:
                conn._advance(PEER_EXCHANGED)
                self._send_tagged(addr, MSG_DIAL, self.peer_id.encode())
        elif tag == MSG_DIAL:
            self._on_dial(body.decode("utf-8"), addr)
        elif tag == MSG_DIAL_ACK:
            conn = self._conns_by_addr.get(source)
            if conn is not None and conn.initiator and conn.phase == PEER_EXCHANGED:
                conn.begin_upgrade()
        elif tag == MSG_CONN:
            conn = self._conns_by_addr.get(source)
            if conn is not None:
                conn.on_conn_bytes(body)

    def _on_dial(self, peer_id: str, addr: MeshAddress) -> None:
        conn = self._conns_by_addr.get(addr.value)
        if conn is not None and conn.phase != FAILED:
            if conn.initiator:
                # Simultaneous open: the lexicographically smaller peer
                # id acts as initiator; the larger side folds.
                if self.peer_id < peer_id:
                    return  # ignore their dial; ours is in flight
                conn._cancel_watchdog()
            elif conn.remote_peer_id == peer_id and conn._stage != "dial":
                # Duplicate dial for an upgrade already in progress.
                self._send_tagged(addr, MSG_DIAL_ACK, self.peer_id.encode())
                return
        conn = Connection(self, peer_id, addr, initiator=False)
        self.connections[peer_id] = conn
        self._conns_by_addr[addr.value] = conn
        conn._advance(PEER_EXCHANGED)
        self._send_tagged(addr, MSG_DIAL_ACK, self.peer_id.encode())
        conn.begin_upgrade()

    # ---- pub/sub wiring ----

    def _on_conn_ready(self, conn: Connection) -> None:
        self.pubsub.add_neighbor(conn.remote_peer_id, conn.enqueue_record)
        if conn.initiator and self.keep_alive_s and self.keep_alive_s > 0:
            self._schedule_keepalive(conn)
        if self.on_conn_ready is not None:
            self.on_conn_ready(conn)

    def _schedule_keepalive(self, conn: Connection) -> None:
        def probe() -> None:
            if self._stopped or not conn.ready:
                return
            conn.enqueue_ping()
            self._keepalive_event = self.sim.call_later(
                seconds(self.keep_alive_s), probe
            )

        self._keepalive_event = self.sim.call_later(seconds(self.keep_alive_s), probe)

    def _on_stream_record(
        self, conn: Connection, stream: MuxStream, record: bytes
    ) -> None:
        if stream.protocol == PROTO_FLOODSUB:
            self.pubsub.on_record(conn.remote_peer_id, record)

    # ---- convenience ----

    def subscribe(self, topic: str, handler) -> None:
        self.pubsub.subscribe(topic, handler)

    def publish(self, topic: str, payload: bytes):
        return self.pubsub.publish(topic, payload)

    def stop(self) -> None:
        self._stopped = True
        if self._keepalive_event is not None:
            self._keepalive_event.cancel()
