"""Simulated Bluetooth-Mesh-style transport: group/unicast addressing,
discovery broadcast, and lower-transport segmentation with ACKs.

Timing follows the advertising-bearer model:

    avg_tx_time  = (10 + (t_int + 10) * t_count) * n_segments     [ms]
    seg_interval = (step + 1) * 10                                [ms]

Messages at or under ``unsegmented_max`` bytes go out unacknowledged
(one transmission plus ``t_count`` extras). Longer payloads split into
``mesh_seg_payload``-byte segments, paced ``tx_seg_int`` apart; each
receiver acknowledges each segment after an ``rx_seg_int`` delay, and
unacknowledged segments are retransmitted up to the per-kind retry
limit. Segment transmissions take per-receiver loss draws; ACKs ride a
reliable reverse path, so per-segment delivery probability over r
retries is exactly 1 - loss_p^(r+1).
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .errors import AddressError, PayloadSizeError
from .sim import LinkModel, Simulator, link_transmit, ms

GROUP_MASK = 0xC000

# Access-layer tags: what kind of application payload a message carries.
TAG_SERIAL = 0
TAG_DISCOVERY = 1

_TOMBSTONE_US = 30_000_000  # swallow late retransmissions of delivered messages


def seg_interval(step: int) -> int:
    """Gap between successive segments in ms: (step + 1) * 10."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return (step + 1) * 10


def seg_gap_total_ms(step: int, n_segments: int) -> int:
    """Accumulated inter-segment gap for n segments (one gap per segment)."""
    return seg_interval(step) * n_segments


@dataclass
class MeshConfig:
    t_count: int = 2  # extra transmissions per message
    t_int_ms: int = 20  # extra-transmission interval step
    tx_seg_int_step: int = 5
    rx_seg_int_step: int = 5
    retries_unicast: int = 1
    retries_multicast: int = 2
    mesh_seg_payload: int = 12  # bytes per lower-transport segment
    unsegmented_max: int = 11
    max_segments: int = 32
    ack_wait_ms: int = 150  # retry check delay after a round's last slot
    relay: bool = False  # one-hop relay of group traffic

    @property
    def tx_seg_int_ms(self) -> int:
        return seg_interval(self.tx_seg_int_step)

    @property
    def rx_seg_int_ms(self) -> int:
        return seg_interval(self.rx_seg_int_step)

    @property
    def max_payload(self) -> int:
        return self.mesh_seg_payload * self.max_segments

    def retries_for(self, dst: "MeshAddress") -> int:
        return self.retries_multicast if dst.is_group else self.retries_unicast


def avg_tx_time(cfg: MeshConfig, n_segments: int) -> int:
    """Average transmission time of n segments in ms."""
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    return (10 + (cfg.t_int_ms + 10) * cfg.t_count) * n_segments


@dataclass(frozen=True)
class MeshAddress:
    value: int

    def __post_init__(self) -> None:
        if not 1 <= self.value <= 0xFFFF:
            raise AddressError(f"address 0x{self.value:04X} out of range")

    @property
    def is_group(self) -> bool:
        return (self.value & GROUP_MASK) == GROUP_MASK

    @property
    def kind(self) -> str:
        return "group" if self.is_group else "unicast"

    def to_device_bytes(self) -> bytes:
        """6-byte device address for the serial frame DST field."""
        return b"\x00\x00\x00\x00" + self.value.to_bytes(2, "big")

    @classmethod
    def from_device_bytes(cls, data: bytes) -> "MeshAddress":
        return cls(int.from_bytes(data[-2:], "big"))

    def __str__(self) -> str:
        return f"0x{self.value:04X}"


@dataclass
class MeshSendHandle:
    dst: MeshAddress
    n_segments: int
    status: str = "pending"  # pending | acked | failed
    completed_at: int | None = None
    attempts: dict[int, int] = field(default_factory=dict)
    _callbacks: list[Callable[["MeshSendHandle"], None]] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.status != "pending"

    def on_complete(self, fn: Callable[["MeshSendHandle"], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _finish(self, status: str, at: int) -> None:
        if self.done:
            return
        self.status = status
        self.completed_at = at
        for fn in self._callbacks:
            fn(self)
        self._callbacks.clear()


@dataclass
class MeshStats:
    transmissions: int = 0  # individual air events (segments and unsegmented)
    retrans_rounds: int = 0
    acks_sent: int = 0
    jobs_acked: int = 0
    jobs_failed: int = 0
    messages_delivered: int = 0
    busy_us: int = 0  # radio occupation, send side


class MeshNetwork:
    """Holds provisioned clients and the links between them."""

    def __init__(self, sim: Simulator, config: MeshConfig | None = None) -> None:
        self.sim = sim
        self.config = config or MeshConfig()
        self.clients: dict[int, MeshClient] = {}
        self._links: dict[tuple[int, int], LinkModel] = {}

    def provision(
        self,
        client: "MeshClient",
        unicast: int | MeshAddress,
        groups: set[int] | set[MeshAddress] = frozenset(),
    ) -> None:
        addr = unicast if isinstance(unicast, MeshAddress) else MeshAddress(unicast)
        if addr.is_group:
            raise AddressError(f"{addr} is a group address")
        if addr.value in self.clients:
            raise AddressError(f"{addr} already provisioned")
        client.unicast = addr
        client.groups = {
            g if isinstance(g, MeshAddress) else MeshAddress(g) for g in groups
        }
        for g in client.groups:
            if not g.is_group:
                raise AddressError(f"{g} is not a group address")
        self.clients[addr.value] = client
        client.network = self

    def set_link(self, a: int, b: int, link: LinkModel) -> None:
        self._links[(min(a, b), max(a, b))] = link

    def link_between(self, a: int, b: int) -> LinkModel | None:
        return self._links.get((min(a, b), max(a, b)))

    def receivers_for(self, sender: "MeshClient", dst: MeshAddress) -> list["MeshClient"]:
        """Clients that can hear this transmission: addressed (or subscribed)
        and within link range of the sender."""
        out = []
        for value in sorted(self.clients):
            client = self.clients[value]
            if client is sender or not client.online:
                continue
            if dst.is_group:
                if dst not in client.groups:
                    continue
            elif client.unicast.value != dst.value:
                continue
            link = self.link_between(sender.unicast.value, value)
            if link is not None and link.in_range:
                out.append(client)
        return out


@dataclass
class _SendJob:
    dst: MeshAddress
    payload: bytes
    tag: int
    seq: int
    handle: MeshSendHandle
    receivers: list["MeshClient"] = field(default_factory=list)
    # segmented state
    segments: list[bytes] = field(default_factory=list)
    pending: dict[int, set[int]] = field(default_factory=dict)  # seg -> unacked addrs


class MeshClient:
    def __init__(self, network: MeshNetwork | None, rng: random.Random) -> None:
        self.network = network
        self.rng = rng
        self.unicast: MeshAddress | None = None
        self.groups: set[MeshAddress] = set()
        self.online = True
        self.peer_label: str | None = None
        self.stats = MeshStats()
        self.on_serial_out: Callable[[bytes, int], None] | None = None
        self.on_discovery: Callable[[str, int], None] | None = None
        self._seq = 0
        self._queue: deque[_SendJob] = deque()
        self._active: _SendJob | None = None
        self._partial: dict[tuple[int, int], dict] = {}
        self._tombstones: dict[tuple[int, int], int] = {}

    @property
    def sim(self) -> Simulator:
        return self.network.sim

    @property
    def cfg(self) -> MeshConfig:
        return self.network.config

    # ---- sending ----

    def send(
        self, dst: int | MeshAddress, payload: bytes, tag: int = TAG_SERIAL
    ) -> MeshSendHandle:
        dst = dst if isinstance(dst, MeshAddress) else MeshAddress(dst)
        cfg = self.cfg
        if len(payload) > cfg.max_payload:
            raise PayloadSizeError(
                f"payload {len(payload)} exceeds {cfg.max_payload} bytes"
            )
        if not payload:
            raise PayloadSizeError("payload must be non-empty")
        if self.unicast is None:
            raise AddressError("client not provisioned")
        self._seq += 1
        n_segs = 1
        if len(payload) > cfg.unsegmented_max:
            n_segs = -(-len(payload) // cfg.mesh_seg_payload)
        handle = MeshSendHandle(dst, n_segs)
        job = _SendJob(dst, payload, tag, self._seq, handle)
        self._queue.append(job)
        self._pump()
        return handle

    def broadcast_presence(self) -> list[MeshSendHandle]:
        """Announce this node's peer label to every subscribed group."""
        if self.peer_label is None:
            raise AddressError("no peer label set")
        payload = self.peer_label.encode("utf-8")
        return [
            self.send(group, payload, tag=TAG_DISCOVERY)
            for group in sorted(self.groups, key=lambda g: g.value)
        ]

    def _pump(self) -> None:
        if self._active is not None or not self._queue or not self.online:
            return
        job = self._queue.popleft()
        self._active = job
        job.receivers = self.network.receivers_for(self, job.dst)
        if not job.dst.is_group and not job.receivers:
            self._finish_job(job, "failed")
            return
        if len(job.payload) <= self.cfg.unsegmented_max:
            self._start_unsegmented(job)
        else:
            self._start_segmented(job)

    def _finish_job(self, job: _SendJob, status: str) -> None:
        job.handle._finish(status, self.sim.now)
        if status == "acked":
            self.stats.jobs_acked += 1
        else:
            self.stats.jobs_failed += 1
        if self._active is job:
            self._active = None
            self.sim.call_later(0, self._pump)

    # ---- unsegmented path ----

    def _start_unsegmented(self, job: _SendJob) -> None:
        cfg = self.cfg
        start = self.sim.now
        gap_us = ms(cfg.t_int_ms + 10)
        for k in range(cfg.t_count + 1):
            self.sim.schedule_at(start + k * gap_us, lambda j=job: self._air_unseg(j))
        duration = ms(10 + (cfg.t_int_ms + 10) * cfg.t_count)
        self.stats.busy_us += duration
        self.sim.schedule_at(start + duration, lambda j=job: self._finish_job(j, "acked"))

    def _air_unseg(self, job: _SendJob) -> None:
        if not self.online or job.handle.done:
            return
        self.stats.transmissions += 1
        job.handle.attempts[0] = job.handle.attempts.get(0, 0) + 1
        for receiver in job.receivers:
            link = self.network.link_between(self.unicast.value, receiver.unicast.value)
            latency = link_transmit(job.payload, link, receiver.rng)
            if latency is None:
                continue
            self.sim.call_later(
                latency,
                lambda r=receiver, j=job: r._receive_unseg(
                    self.unicast.value, j.seq, j.dst, j.payload, j.tag
                ),
            )

    def _receive_unseg(
        self, src: int, seq: int, dst: MeshAddress, payload: bytes, tag: int
    ) -> None:
        if not self.online:
            return
        key = (src, seq)
        if not self._mark_delivered(key):
            return
        self._deliver_up(src, seq, dst, payload, tag)

    # ---- segmented path ----

    def _start_segmented(self, job: _SendJob) -> None:
        cfg = self.cfg
        size = cfg.mesh_seg_payload
        job.segments = [
            job.payload[i : i + size] for i in range(0, len(job.payload), size)
        ]
        addrs = {r.unicast.value for r in job.receivers}
        # A group send with nobody in range succeeds vacuously after the
        # send phase: pending starts empty, so the first ack check passes.
        job.pending = {i: set(addrs) for i in range(len(job.segments))}
        for i in range(len(job.segments)):
            job.handle.attempts[i] = 0
        self._run_round(job, list(range(len(job.segments))))

    def _run_round(self, job: _SendJob, indices: list[int]) -> None:
        cfg = self.cfg
        start = self.sim.now
        gap_us = ms(cfg.tx_seg_int_ms)
        for slot, seg_i in enumerate(indices):
            self.sim.schedule_at(
                start + slot * gap_us, lambda j=job, i=seg_i: self._air_segment(j, i)
            )
        phase_us = len(indices) * gap_us
        self.stats.busy_us += phase_us
        self.sim.schedule_at(
            start + phase_us + ms(cfg.ack_wait_ms),
            lambda j=job: self._ack_check(j),
        )

    def _air_segment(self, job: _SendJob, seg_i: int) -> None:
        if not self.online or job.handle.done:
            return
        self.stats.transmissions += 1
        job.handle.attempts[seg_i] += 1
        chunk = job.segments[seg_i]
        n = len(job.segments)
        for receiver in job.receivers:
            link = self.network.link_between(self.unicast.value, receiver.unicast.value)
            latency = link_transmit(chunk, link, receiver.rng)
            if latency is None:
                continue
            self.sim.call_later(
                latency,
                lambda r=receiver, j=job, i=seg_i, c=chunk, total=n: r._receive_segment(
                    self.unicast.value, j.seq, j.dst, i, total, c, j.tag, j
                ),
            )

    def _ack_check(self, job: _SendJob) -> None:
        if job.handle.done:
            return
        cfg = self.cfg
        missing = sorted(i for i, addrs in job.pending.items() if addrs)
        if not missing:
            self._finish_job(job, "acked")
            return
        max_attempts = 1 + cfg.retries_for(job.dst)
        if any(job.handle.attempts[i] >= max_attempts for i in missing):
            self._finish_job(job, "failed")
            return
        self.stats.retrans_rounds += 1
        self._run_round(job, missing)

    def _receive_segment(
        self,
        src: int,
        seq: int,
        dst: MeshAddress,
        seg_i: int,
        n_segs: int,
        chunk: bytes,
        tag: int,
        job: _SendJob,
    ) -> None:
        if not self.online:
            return
        key = (src, seq)
        if key in self._tombstones:
            self._ack_later(src, job, seg_i)  # re-ack so the sender can finish
            return
        entry = self._partial.setdefault(
            key, {"segs": {}, "n": n_segs, "dst": dst, "tag": tag}
        )
        first_time = seg_i not in entry["segs"]
        entry["segs"][seg_i] = chunk
        self._ack_later(src, job, seg_i)
        if first_time and len(entry["segs"]) == entry["n"]:
            del self._partial[key]
            if self._mark_delivered(key):
                payload = b"".join(entry["segs"][i] for i in range(entry["n"]))
                self._deliver_up(src, seq, dst, payload, tag)

    def _ack_later(self, src: int, job: _SendJob, seg_i: int) -> None:
        """Schedule the segment acknowledgment after the receive interval.

        ACK transport is modeled reliable; only its latency is sampled,
        from the sender's stream, since the ACK arrives at the sender.
        """
        self.stats.acks_sent += 1
        me = self.unicast.value

        def _send_ack() -> None:
            owner = self.network.clients.get(src)
            if owner is None:
                return
            link = self.network.link_between(me, src)
            if link is None:
                return
            latency = link.sample_latency_us(owner.rng)
            self.sim.call_later(latency, lambda: owner._on_ack(job, seg_i, me))

        self.sim.call_later(ms(self.cfg.rx_seg_int_ms), _send_ack)

    def _on_ack(self, job: _SendJob, seg_i: int, from_addr: int) -> None:
        if not self.online or job.handle.done:
            return
        job.pending.get(seg_i, set()).discard(from_addr)
        if all(not addrs for addrs in job.pending.values()):
            self._finish_job(job, "acked")

    # ---- delivery plumbing ----

    def _mark_delivered(self, key: tuple[int, int]) -> bool:
        now = self.sim.now
        for k in [k for k, exp in self._tombstones.items() if exp <= now]:
            del self._tombstones[k]
        if key in self._tombstones:
            return False
        self._tombstones[key] = now + _TOMBSTONE_US
        return True

    def _deliver_up(
        self,
        src: int,
        seq: int,
        dst: MeshAddress,
        payload: bytes,
        tag: int,
        relayed: bool = False,
    ) -> None:
        self.stats.messages_delivered += 1
        if tag == TAG_DISCOVERY:
            if self.on_discovery is not None:
                self.on_discovery(payload.decode("utf-8"), src)
        elif self.on_serial_out is not None:
            self.on_serial_out(payload, src)
        if self.cfg.relay and dst.is_group and not relayed:
            self._relay(src, seq, dst, payload, tag)

    def _relay(
        self, src: int, seq: int, dst: MeshAddress, payload: bytes, tag: int
    ) -> None:
        """One-hop relay of completed group messages (off by default).

        The relay re-airs every segment once, unacknowledged, toward its
        own neighborhood; a receiver gets the message if all its segment
        draws succeed. Relayed copies keep the original (source, seq)
        key, so nodes that already delivered the original drop the
        duplicate, and relayed traffic is never relayed again.
        """
        cfg = self.cfg
        size = cfg.mesh_seg_payload
        chunks = [payload[i : i + size] for i in range(0, len(payload), size)]
        duration = ms(len(chunks) * cfg.tx_seg_int_ms)
        for receiver in self.network.receivers_for(self, dst):
            if receiver.unicast.value == src:
                continue
            link = self.network.link_between(self.unicast.value, receiver.unicast.value)
            latency = 0
            for chunk in chunks:
                sample = link_transmit(chunk, link, receiver.rng)
                if sample is None:
                    latency = -1
                    break
                latency = sample
            if latency >= 0:
                self.sim.call_later(
                    duration + latency,
                    lambda r=receiver, p=payload: r._receive_relayed(
                        src, seq, dst, p, tag
                    ),
                )

    def _receive_relayed(
        self, src: int, seq: int, dst: MeshAddress, payload: bytes, tag: int
    ) -> None:
        if not self.online:
            return
        if self._mark_delivered((src, seq)):
            self._deliver_up(src, seq, dst, payload, tag, relayed=True)

    # ---- churn ----

    def leave(self) -> None:
        """Go offline, dropping all in-flight state."""
        self.online = False
        if self._active is not None:
            self._finish_job(self._active, "failed")
        while self._queue:
            job = self._queue.popleft()
            job.handle._finish("failed", self.sim.now)
            self.stats.jobs_failed += 1
        self._partial.clear()

    def join(self) -> None:
        """Come back online and re-announce presence if labeled."""
        self.online = True
        if self.peer_label is not None:
            self.broadcast_presence()
