"""Experiment runner: builds a two-node stack from a scenario, replays
the measurement protocol (connect, then publish N packets at a fixed
interval), and reports per-packet latency plus the packet delivery
ratio.

Latency is measured from the publish call on the sender to the
subscriber delivery on the receiver. Lost packets count against the
PDR but are excluded from latency statistics. The run is fully
deterministic for a given (scenario, seed).
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import varint
from .bridge import Bridge, BridgeConfig, PipePort
from .errors import ConnectionFailed, ScenarioError
from .frame_codec import FrameStreamParser
from .host import Host
from .mesh import MeshAddress, MeshClient, MeshNetwork
from .mux import encode_frame as mux_encode_frame
from .mux import FLAG_DATA
from .pubsub import KIND_MSG, PubSubMessage, encode_record
from .scenario import ScenarioConfig
from .secure import SEQ_LEN, TAG_LEN
from .sim import Simulator, derive_rng, seconds

_SETUP_GRACE_S = 90.0
_DRAIN_GRACE_S = 60.0
_INDEX_PREFIX_LEN = 6


@dataclass
class PacketRecord:
    index: int
    sent_at_us: int
    received_at_us: int | None = None

    @property
    def delivered(self) -> bool:
        return self.received_at_us is not None

    @property
    def status(self) -> str:
        return "delivered" if self.delivered else "lost"

    @property
    def latency_us(self) -> int | None:
        if self.received_at_us is None:
            return None
        return self.received_at_us - self.sent_at_us

    @property
    def latency_ms(self) -> float | None:
        latency = self.latency_us
        return None if latency is None else latency / 1000.0


@dataclass
class RunReport:
    scenario: str
    seed: int
    records: list[PacketRecord]
    mean_latency_ms: float | None
    stddev_series: list[float | None]
    pdr: float
    meta: dict = field(default_factory=dict)

    @property
    def stddev_ms(self) -> float | None:
        return self.stddev_series[-1] if self.stddev_series else None

    @property
    def delivered_count(self) -> int:
        return sum(1 for r in self.records if r.delivered)

    def csv_text(self) -> str:
        lines = ["index,sent_ms,recv_ms,latency_ms,status"]
        for r in self.records:
            recv = _fmt_ms(r.received_at_us) if r.delivered else ""
            latency = _fmt_ms(r.latency_us) if r.delivered else ""
            lines.append(f"{r.index},{_fmt_ms(r.sent_at_us)},{recv},{latency},{r.status}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.csv_text(), encoding="ascii")

    def summary_line(self) -> str:
        mean = f"{self.mean_latency_ms:.1f}" if self.mean_latency_ms is not None else "n/a"
        stddev = f"{self.stddev_ms:.1f}" if self.stddev_ms is not None else "n/a"
        return (
            f"{self.scenario} seed={self.seed}: "
            f"delivered {self.delivered_count}/{len(self.records)} "
            f"(PDR {self.pdr:.1f}%), mean latency {mean} ms, stddev {stddev} ms"
        )


def _fmt_ms(us: int) -> str:
    return f"{us // 1000}.{us % 1000:03d}"


def report_stats(
    records: list[PacketRecord], scenario: str = "", seed: int = 0, meta: dict | None = None
) -> RunReport:
    """Mean/stddev/PDR over packet records.

    The rolling stddev at index i is the population standard deviation
    over latencies of packets delivered up to and including i; entries
    are None until the first delivery. A run with zero deliveries has
    an undefined mean, flagged as None with meta["no_deliveries"].
    """
    if not records:
        raise ValueError("need at least one record")
    meta = dict(meta or {})
    latencies: list[float] = []
    series: list[float | None] = []
    for record in records:
        if record.delivered:
            latencies.append(record.latency_ms)
        series.append(statistics.pstdev(latencies) if latencies else None)
    mean = statistics.fmean(latencies) if latencies else None
    if not latencies:
        meta["no_deliveries"] = True
    pdr = 100.0 * len(latencies) / len(records)
    return RunReport(scenario, seed, records, mean, series, pdr, meta)


def payload_for_index(index: int, size: int) -> bytes:
    """Deterministic packet body carrying its own index."""
    prefix = f"{index:0{_INDEX_PREFIX_LEN}d}".encode("ascii")
    if size <= _INDEX_PREFIX_LEN:
        return prefix
    filler = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    body = (filler * (size // len(filler) + 1))[: size - _INDEX_PREFIX_LEN]
    return prefix + body


def wire_size_for_payload(payload_len: int, topic: str, source_peer_id: str) -> int:
    """Bridge-level message size for one published packet of payload_len."""
    message = PubSubMessage(source_peer_id, 1, topic, b"\x00" * payload_len)
    record = encode_record(KIND_MSG, topic, message)
    stream_bytes = varint.frame_record(record)
    mux_frame = mux_encode_frame(1, FLAG_DATA, stream_bytes)
    sealed = SEQ_LEN + len(mux_frame) + TAG_LEN
    framed = len(varint.encode(sealed)) + sealed
    return 1 + framed  # bridge message tag byte


def payload_size_for_wire_target(target: int, topic: str, source_peer_id: str) -> int:
    """Largest payload whose published wire message is <= target bytes."""
    n = max(_INDEX_PREFIX_LEN + 1, target - 120)
    for _ in range(8):
        wire = wire_size_for_payload(n, topic, source_peer_id)
        if wire == target:
            return n
        n = max(_INDEX_PREFIX_LEN + 1, n + (target - wire))
    while wire_size_for_payload(n, topic, source_peer_id) > target:
        n -= 1
    return max(_INDEX_PREFIX_LEN + 1, n)


class NodeStack:
    """One simulated node: mesh client + serial pipe + bridge + host."""

    def __init__(
        self,
        sim: Simulator,
        network: MeshNetwork,
        name: str,
        unicast: int,
        groups: tuple[int, ...],
        bridge_config: BridgeConfig,
        seed: int,
        keep_alive_s: float,
        strict_floodsub: bool = False,
    ) -> None:
        self.name = name
        self.client = MeshClient(None, derive_rng(seed, f"mesh:{name}"))
        network.provision(self.client, unicast, set(groups))
        self.port = PipePort(sim)
        self.bridge = Bridge(self.port, sim, replace(bridge_config))
        self.host = Host(
            sim,
            self.bridge,
            self.client,
            derive_rng(seed, f"host:{name}"),
            keep_alive_s=keep_alive_s,
            strict_floodsub=strict_floodsub,
        )
        self._egress_parser = FrameStreamParser()
        self.port.receiver = self._serial_to_mesh
        self.client.on_serial_out = self.bridge.on_bytes

    def _serial_to_mesh(self, data: bytes) -> None:
        # The mesh client reads frames off the serial line, picks the
        # destination out of the DST field, and radios the frame onward.
        for frame in self._egress_parser.feed(data):
            dst = MeshAddress.from_device_bytes(frame.dst)
            self.client.send(dst, frame.encode())


def build_stacks(
    config: ScenarioConfig, sim: Simulator
) -> tuple[MeshNetwork, dict[str, NodeStack]]:
    """Instantiate the two active nodes (sender/receiver) and their links."""
    network = MeshNetwork(sim, replace(config.mesh))
    stacks: dict[str, NodeStack] = {}
    for name in (config.sender, config.receiver):
        spec = config.nodes[name]
        stacks[name] = NodeStack(
            sim,
            network,
            name,
            spec.unicast,
            spec.groups,
            config.bridge,
            config.seed,
            config.keep_alive_s,
            config.strict_floodsub,
        )
    link = config.link_for(config.sender, config.receiver)
    if link is None:
        raise ScenarioError(
            f"no link between {config.sender} and {config.receiver}"
        )
    network.set_link(
        config.nodes[config.sender].unicast,
        config.nodes[config.receiver].unicast,
        replace(link),
    )
    return network, stacks


def run_experiment(config: ScenarioConfig) -> RunReport:
    config.validate()
    sim = Simulator()
    network, stacks = build_stacks(config, sim)
    sender = stacks[config.sender]
    receiver = stacks[config.receiver]

    target = config.message_size_bytes or 2000
    payload_size = payload_size_for_wire_target(
        target, config.topic, sender.host.peer_id
    )

    records: list[PacketRecord] = []
    ready_at: list[int] = []

    def on_delivery(message: PubSubMessage) -> None:
        try:
            index = int(message.payload[:_INDEX_PREFIX_LEN])
        except ValueError:
            return
        if 0 <= index < len(records) and records[index].received_at_us is None:
            records[index].received_at_us = sim.now

    receiver.host.subscribe(config.topic, on_delivery)

    def publish_next() -> None:
        index = len(records)
        if index >= config.packet_count:
            return
        records.append(PacketRecord(index, sim.now))
        sender.host.publish(config.topic, payload_for_index(index, payload_size))
        if index + 1 < config.packet_count:
            sim.call_later(seconds(config.send_interval_s), publish_next)

    def on_ready(conn) -> None:
        if not ready_at:
            ready_at.append(sim.now)
            publish_next()

    sender.host.on_conn_ready = on_ready

    def on_discovered(peer_id: str) -> None:
        if peer_id == receiver.host.peer_id and not ready_at:
            sender.host.connect_to_peer(peer_id)

    sender.host.on_peer_discovered = on_discovered

    sim.schedule_at(0, sender.host.announce_presence)
    sim.schedule_at(0, receiver.host.announce_presence)

    for event in config.churn:
        stack = stacks.get(event.node)
        if stack is None:
            continue
        action = stack.client.leave if event.action == "leave" else stack.client.join
        sim.schedule_at(seconds(event.at_s), action)

    t_end = seconds(
        _SETUP_GRACE_S
        + (config.packet_count - 1) * config.send_interval_s
        + _DRAIN_GRACE_S
    )
    sim.run_until(t_end)
    sender.host.stop()
    receiver.host.stop()

    if not ready_at:
        raise ConnectionFailed("connection never became ready")
    if len(records) < config.packet_count:
        # Connection came up too close to the horizon; extend and finish.
        sim.run_until(t_end + seconds(_SETUP_GRACE_S))

    meta = {
        "ready_at_ms": ready_at[0] // 1000,
        "payload_bytes": payload_size,
        "wire_message_bytes": wire_size_for_payload(
            payload_size, config.topic, sender.host.peer_id
        ),
        "sender_frames_sent": sender.bridge.frames_sent,
        "sender_mesh_transmissions": sender.client.stats.transmissions,
        "sender_mesh_retrans_rounds": sender.client.stats.retrans_rounds,
        "sender_mesh_busy_ms": sender.client.stats.busy_us // 1000,
        "receiver_bridge_timeouts": sum(
            1 for e in receiver.bridge.events if e.kind == "timeout"
        ),
    }
    conn = sender.host.connections.get(receiver.host.peer_id)
    meta["keepalive_pings"] = conn.pings_sent if conn is not None else 0
    return report_stats(records, config.name, config.seed, meta)


def run_many(config: ScenarioConfig, seeds: list[int]) -> list[RunReport]:
    reports = []
    for seed in seeds:
        cfg = replace(config, seed=seed)
        reports.append(run_experiment(cfg))
    return reports


def aggregate_pdr(reports: list[RunReport]) -> tuple[float, float, float]:
    """Pooled PDR with a 95% normal-approximation binomial CI."""
    delivered = sum(r.delivered_count for r in reports)
    sent = sum(len(r.records) for r in reports)
    p = delivered / sent
    half = 1.96 * (p * (1 - p) / sent) ** 0.5
    return 100.0 * p, 100.0 * max(0.0, p - half), 100.0 * min(1.0, p + half)
