"""Scenario configuration: node placement, links, protocol parameters,
and the experiment schedule, loaded from a plain-text sectioned file.

Sections:

    [scenario]        sender/receiver, packet_count, send_interval_s,
                      keep_alive_s, message_size_bytes, seed, topic
    [mesh]            t_count, t_int_ms, tx_seg_int_step, rx_seg_int_step,
                      retries_unicast, retries_multicast, ...
    [bridge]          inter_segment_delay_ms, reassembly_timeout_ms
    [node <name>]     position = x, y   unicast = 0x....   groups = 0xC000
    [link <a> <b>]    base_latency_ms, jitter_ms, loss_p, max_range_m
    [churn]           events = leave <node> <t_s> / join <node> <t_s>

Link distance is computed from node positions; delivery requires the
distance to be within the link's max_range_m.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .bridge import BridgeConfig
from .errors import ScenarioError
from .mesh import MeshConfig
from .sim import LinkModel

DEFAULT_PACKET_COUNT = 100
DEFAULT_SEND_INTERVAL_S = 9.0
DEFAULT_KEEP_ALIVE_S = 540.0
DEFAULT_TOPIC = "telemetry"


@dataclass(frozen=True)
class NodeSpec:
    name: str
    position: tuple[float, float]
    unicast: int
    groups: tuple[int, ...]


@dataclass(frozen=True)
class ChurnEvent:
    action: str  # leave | join
    node: str
    at_s: float


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    nodes: dict[str, NodeSpec] = field(default_factory=dict)
    links: dict[tuple[str, str], LinkModel] = field(default_factory=dict)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    sender: str = "sender"
    receiver: str = "receiver"
    packet_count: int = DEFAULT_PACKET_COUNT
    send_interval_s: float = DEFAULT_SEND_INTERVAL_S
    keep_alive_s: float = DEFAULT_KEEP_ALIVE_S
    message_size_bytes: int | None = None
    seed: int = 1
    topic: str = DEFAULT_TOPIC
    strict_floodsub: bool = False
    churn: list[ChurnEvent] = field(default_factory=list)

    def validate(self) -> None:
        if self.send_interval_s <= 0:
            raise ScenarioError("send_interval_s must be > 0")
        if self.packet_count < 1:
            raise ScenarioError("packet_count must be >= 1")
        for endpoint in (self.sender, self.receiver):
            if endpoint not in self.nodes:
                raise ScenarioError(f"node '{endpoint}' not defined")
        if self.sender == self.receiver:
            raise ScenarioError("sender and receiver must differ")
        for (a, b) in self.links:
            for name in (a, b):
                if name not in self.nodes:
                    raise ScenarioError(f"link references unknown node '{name}'")
        for event in self.churn:
            if event.node not in self.nodes:
                raise ScenarioError(f"churn references unknown node '{event.node}'")
            if event.action not in ("leave", "join"):
                raise ScenarioError(f"unknown churn action '{event.action}'")
        seen = set()
        for spec in self.nodes.values():
            if spec.unicast in seen:
                raise ScenarioError(f"duplicate unicast address 0x{spec.unicast:04X}")
            seen.add(spec.unicast)

    def link_for(self, a: str, b: str) -> LinkModel | None:
        return self.links.get((min(a, b), max(a, b)))

    def with_receiver(self, receiver: str) -> "ScenarioConfig":
        cfg = replace(self, receiver=receiver)
        cfg.validate()
        return cfg


def _parse_int(text: str) -> int:
    return int(text.strip(), 0)  # accepts 0x...


def _distance(a: NodeSpec, b: NodeSpec) -> float:
    return math.dist(a.position, b.position)


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read(path)
    cfg = ScenarioConfig(name=path.stem)

    if parser.has_section("scenario"):
        s = parser["scenario"]
        cfg.sender = s.get("sender", cfg.sender)
        cfg.receiver = s.get("receiver", cfg.receiver)
        cfg.packet_count = s.getint("packet_count", cfg.packet_count)
        cfg.send_interval_s = s.getfloat("send_interval_s", cfg.send_interval_s)
        cfg.keep_alive_s = s.getfloat("keep_alive_s", cfg.keep_alive_s)
        if "message_size_bytes" in s:
            cfg.message_size_bytes = s.getint("message_size_bytes")
        cfg.seed = s.getint("seed", cfg.seed)
        cfg.topic = s.get("topic", cfg.topic)
        cfg.strict_floodsub = s.getboolean("strict_floodsub", cfg.strict_floodsub)

    if parser.has_section("mesh"):
        m = parser["mesh"]
        cfg.mesh = MeshConfig(
            t_count=m.getint("t_count", cfg.mesh.t_count),
            t_int_ms=m.getint("t_int_ms", cfg.mesh.t_int_ms),
            tx_seg_int_step=m.getint("tx_seg_int_step", cfg.mesh.tx_seg_int_step),
            rx_seg_int_step=m.getint("rx_seg_int_step", cfg.mesh.rx_seg_int_step),
            retries_unicast=m.getint("retries_unicast", cfg.mesh.retries_unicast),
            retries_multicast=m.getint("retries_multicast", cfg.mesh.retries_multicast),
            mesh_seg_payload=m.getint("mesh_seg_payload", cfg.mesh.mesh_seg_payload),
            unsegmented_max=m.getint("unsegmented_max", cfg.mesh.unsegmented_max),
            max_segments=m.getint("max_segments", cfg.mesh.max_segments),
            ack_wait_ms=m.getint("ack_wait_ms", cfg.mesh.ack_wait_ms),
            relay=m.getboolean("relay", cfg.mesh.relay),
        )

    if parser.has_section("bridge"):
        b = parser["bridge"]
        cfg.bridge = BridgeConfig(
            inter_segment_delay_ms=b.getfloat(
                "inter_segment_delay_ms", cfg.bridge.inter_segment_delay_ms
            ),
            reassembly_timeout_ms=b.getfloat(
                "reassembly_timeout_ms", cfg.bridge.reassembly_timeout_ms
            ),
        )

    for section in parser.sections():
        parts = section.split()
        if parts[0] == "node" and len(parts) == 2:
            name = parts[1]
            sec = parser[section]
            try:
                x_text, y_text = sec.get("position", "0, 0").split(",")
                position = (float(x_text), float(y_text))
                unicast = _parse_int(sec.get("unicast"))
            except (ValueError, TypeError) as exc:
                raise ScenarioError(f"bad node section [{section}]: {exc}") from exc
            groups = tuple(
                _parse_int(g) for g in sec.get("groups", "").split(",") if g.strip()
            )
            cfg.nodes[name] = NodeSpec(name, position, unicast, groups)
        elif parts[0] == "link" and len(parts) == 3:
            a, b = parts[1], parts[2]
            sec = parser[section]
            cfg.links[(min(a, b), max(a, b))] = LinkModel(
                base_latency_ms=sec.getfloat("base_latency_ms", 0.0),
                jitter_ms=sec.getfloat("jitter_ms", 0.0),
                loss_p=sec.getfloat("loss_p", 0.0),
                max_range_m=sec.getfloat("max_range_m", 100.0),
            )

    if parser.has_section("churn"):
        for line in parser["churn"].get("events", "").splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                action, node, at_text = line.split()
                cfg.churn.append(ChurnEvent(action, node, float(at_text)))
            except ValueError as exc:
                raise ScenarioError(f"bad churn event '{line}'") from exc

    # Fill link distances from node positions.
    for (a, b), link in list(cfg.links.items()):
        if a in cfg.nodes and b in cfg.nodes:
            link.distance_m = _distance(cfg.nodes[a], cfg.nodes[b])

    cfg.validate()
    return cfg


def builtin_scenario_path(name: str) -> Path:
    """Path of a scenario file shipped with the package (e.g. 'home')."""
    stem = name.removesuffix(".scenario")
    path = Path(__file__).parent / "scenarios" / f"{stem}.scenario"
    if not path.exists():
        raise ScenarioError(f"no built-in scenario '{name}'")
    return path
