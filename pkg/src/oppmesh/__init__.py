"""Opportunistic mesh networking stack with a desk-scale simulator.

Layers, bottom up: a deterministic discrete-event simulator with link
loss/latency models; a Bluetooth-Mesh-style segmented transport with
tunable timing; a serial bridge that hex-encodes, frames, paces, and
reassembles messages; a p2p host with protocol negotiation, an
authenticated secure channel, and a stream multiplexer; flood-based
publish/subscribe; and an experiment harness that reproduces latency
and packet-delivery measurements.
"""

from .bridge import Bridge, BridgeConfig, BridgeEvent, PipePort
from .errors import OppMeshError
from .frame_codec import (
    FrameStreamParser,
    MessageHeader,
    SegmentFrame,
    encode_message,
    hex_decode,
    hex_encode,
    parse_stream,
    reassemble,
)
from .harness import (
    PacketRecord,
    RunReport,
    report_stats,
    run_experiment,
    run_many,
)
from .host import Connection, Host, RoutingTable
from .mesh import (
    MeshAddress,
    MeshClient,
    MeshConfig,
    MeshNetwork,
    avg_tx_time,
    seg_gap_total_ms,
    seg_interval,
)
from .multistream import multistream_encode, negotiate
from .pubsub import FloodSub, PubSubMessage, SeenCache
from .scenario import ScenarioConfig, builtin_scenario_path, load_scenario
from .secure import SecureChannel, StaticKeypair, handshake, peer_id_from_public_key
from .sim import LinkModel, SimEvent, Simulator, derive_rng, link_transmit

__version__ = "0.1.0"

__all__ = [
    "Bridge",
    "BridgeConfig",
    "BridgeEvent",
    "Connection",
    "FloodSub",
    "FrameStreamParser",
    "Host",
    "LinkModel",
    "MeshAddress",
    "MeshClient",
    "MeshConfig",
    "MeshNetwork",
    "MessageHeader",
    "OppMeshError",
    "PacketRecord",
    "PipePort",
    "PubSubMessage",
    "RoutingTable",
    "RunReport",
    "ScenarioConfig",
    "SecureChannel",
    "SeenCache",
    "SegmentFrame",
    "SimEvent",
    "Simulator",
    "StaticKeypair",
    "avg_tx_time",
    "builtin_scenario_path",
    "derive_rng",
    "encode_message",
    "handshake",
    "hex_decode",
    "hex_encode",
    "link_transmit",
    "load_scenario",
    "multistream_encode",
    "negotiate",
    "parse_stream",
    "peer_id_from_public_key",
    "reassemble",
    "report_stats",
    "run_experiment",
    "run_many",
    "seg_gap_total_ms",
    "seg_interval",
]
