"""Flow middlebox: splits flows into sections joined by a per-flow shared queue.

The middlebox is transparent. It intercepts flow datagrams that cross it,
terminates the upstream section (acking on behalf of the far end), queues the
opaque payload, and re-originates it on a downstream section (sending on behalf
of the near end). An upstream packet is acked only once it has been
transmitted downstream, so downstream congestion turns into upstream
backpressure.

Only the Endpoint and Flow headers are parsed. Everything above is bytes.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field

from . import endpoint
from .endpoint import EndpointAddr
from .flow import (
    F_ACK,
    F_ELN,
    F_PURE,
    FlowCondition,
    FlowReceiver,
    FlowSection,
    FlowUser,
    HEADER,
    MalformedFlowPacket,
    decode,
)
from .flowcc import CcConfig, fixed_window_share, make_controller
from .sim.engine import NS_PER_S, Timer
from .sim.network import Datagram, Node

REGISTRY_PORT = 3737


@dataclass
class SideConfig:
    """How the middlebox runs sections that leave toward one neighbor."""

    controller: str = "newreno"
    queue_capacity: int = 10
    fixed_rate: float | None = None  # total packets/s shared by all flows on this side
    local_recovery: bool = False

    def to_dict(self) -> dict:
        return {"controller": self.controller, "queue_capacity": self.queue_capacity,
                "fixed_rate": self.fixed_rate, "local_recovery": self.local_recovery}


@dataclass
class MiddleboxConfig:
    sides: dict[str, SideConfig] = field(default_factory=dict)
    default: SideConfig = field(default_factory=SideConfig)
    max_flows: int = 1024
    idle_timeout_s: float = 30.0
    cc: CcConfig = field(default_factory=CcConfig)

    def side(self, neighbor: str) -> SideConfig:
        return self.sides.get(neighbor, self.default)


class SharedQueue:
    """Drop-tail FIFO of ``(upstream_seq, payload)``."""

    __slots__ = ("capacity", "entries", "seqs", "drops", "max_len")

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("shared queue capacity must be at least 1")
        self.capacity = capacity
        self.entries: deque[tuple[int, bytes]] = deque()
        self.seqs: set[int] = set()
        self.drops = 0
        self.max_len = 0

    def __len__(self):
        return len(self.entries)

    def push(self, seq: int, payload: bytes) -> bool:
        if len(self.entries) >= self.capacity:
            self.drops += 1
            return False
        self.entries.append((seq, payload))
        self.seqs.add(seq)
        if len(self.entries) > self.max_len:
            self.max_len = len(self.entries)
        return True

    def pop(self) -> tuple[int, bytes]:
        seq, payload = self.entries.popleft()
        self.seqs.discard(seq)
        return seq, payload


def _digest(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()[:16]


class SplitFlow(FlowUser):
    """One direction of one end-to-end flow, split at this middlebox."""

    def __init__(self, mb: "Middlebox", src: EndpointAddr, dst: EndpointAddr,
                 side: SideConfig, neighbor: str):
        self.mb = mb
        self.key = (src, dst)
        self.src = src
        self.dst = dst
        self.neighbor = neighbor
        self.side = side
        self.queue = SharedQueue(side.queue_capacity)
        self.upstream = FlowReceiver()
        overrides = {}
        if side.fixed_rate is not None:
            overrides["fixed_rate"] = side.fixed_rate
        cc = make_controller(side.controller, mb.config.cc, **overrides)
        self.downstream = FlowSection(
            mb.sim, cc, self._down_output, self, local_recovery=side.local_recovery,
            name=f"{mb.node.name}:{src.port}>{dst.port}")
        self.last_activity = mb.sim.now
        self.deposited = 0
        self.forwarded = 0
        self.released = 0
        self._inflight_up: int | None = None

    # wire helpers
    def _down_output(self, flow_bytes: bytes) -> None:
        data = endpoint.encode(self.src.port, self.dst.port, flow_bytes)
        mb = self.mb
        if mb.tracer is not None:
            mb.tracer.on_wire_forward(self, flow_bytes)
        mb.node.forward(Datagram(self.src.host, self.dst.host, data))

    def _up_output(self, flow_bytes: bytes) -> None:
        data = endpoint.encode(self.dst.port, self.src.port, flow_bytes)
        self.mb.node.forward(Datagram(self.dst.host, self.src.host, data))

    def _release_ack(self, seq: int) -> None:
        self.upstream.accept(seq)
        r = self.upstream
        self.released += 1
        if self.mb.tracer is not None:
            self.mb.tracer.on_release(self, seq)
        self._up_output(_ack_bytes(r))

    # upstream data path
    def deposit(self, seq: int, payload: bytes) -> bool:
        self.last_activity = self.mb.sim.now
        q = self.queue
        if seq in q.seqs:
            return False
        if self.upstream.received(seq):
            self._up_output(_ack_bytes(self.upstream))
            return False
        if not q.push(seq, payload):
            self.mb.sim.trace("mb_drop", self.mb.node.name, f"{self.src.port}>{self.dst.port} {seq}")
            return False
        self.deposited += 1
        if self.mb.tracer is not None:
            self.mb.tracer.on_deposit(self, seq, payload)
        self.downstream.pump()
        return True

    # FlowUser for the downstream section
    def flow_pending(self, section) -> bool:
        return bool(self.queue.entries)

    def flow_pull(self, section) -> bytes | None:
        if not self.queue.entries:
            return None
        seq, payload = self.queue.pop()
        self._inflight_up = seq
        self.forwarded += 1
        if self.mb.tracer is not None:
            self.mb.tracer.on_forward(self, seq, payload)
        return payload

    def flow_sent(self, section, seq: int) -> None:
        up = self._inflight_up
        self._inflight_up = None
        self.last_activity = self.mb.sim.now
        if up is not None:
            self._release_ack(up)

    def flow_condition(self, section, cond) -> None:
        if cond is FlowCondition.DOWN:
            self.mb.remove_flow(self.key, "downstream down")

    def close(self) -> None:
        self.downstream.close()
        self.queue.entries.clear()
        self.queue.seqs.clear()

    def state(self) -> dict:
        return {
            "src": list(self.src), "dst": list(self.dst), "neighbor": self.neighbor,
            "queue": len(self.queue), "deposited": self.deposited,
            "forwarded": self.forwarded, "released": self.released,
            "downstream": self.downstream.state(),
        }


def _ack_bytes(r: FlowReceiver) -> bytes:
    return HEADER.pack(0, r.highest, (r.bitmap << 8) | F_ACK | F_PURE)


class MiddleboxTracer:
    """Records per-packet evidence for the queue-sharing invariants.

    Entries are keyed by ``(flow_key, upstream_seq)``: ``deposits`` holds the
    payload digest as received, ``forwards`` the transmit time and the digest of
    the payload actually put on the wire, ``releases`` the upstream ack time.
    ``deposit_log`` lists ``(time, flow_key, payload_bytes)`` in arrival order.
    """

    def __init__(self, sim):
        self.sim = sim
        self.deposits: dict[tuple, str] = {}
        self.forwards: dict[tuple, tuple[int, str]] = {}
        self.releases: dict[tuple, int] = {}
        self.deposit_log: list[tuple[int, tuple, int]] = []
        self._pending: tuple | None = None

    def on_deposit(self, sf, seq, payload):
        self.deposits[(sf.key, seq)] = _digest(payload)
        self.deposit_log.append((self.sim.now, sf.key, len(payload)))

    def on_forward(self, sf, seq, payload):
        self._pending = (sf.key, seq)

    def on_wire_forward(self, sf, flow_bytes):
        tag = self._pending
        if tag is None or tag[0] != sf.key:
            return
        self._pending = None
        self.forwards[tag] = (self.sim.now, _digest(flow_bytes[HEADER.size:]))

    def on_release(self, sf, seq):
        self.releases[(sf.key, seq)] = self.sim.now


class Middlebox:
    """All soft state of one flow middlebox. Rebuilt from scratch on restart."""

    def __init__(self, node: "MiddleboxNode", config: MiddleboxConfig):
        self.node = node
        self.sim = node.sim
        self.config = config
        self.flows: dict[tuple, SplitFlow] = {}
        self.passthrough = 0
        self.created = 0
        self.removed = 0
        self.tracer: MiddleboxTracer | None = None
        self._sweep = Timer(self.sim, self._on_sweep)
        self._sweep.start(int(config.idle_timeout_s * NS_PER_S))

    def intercept(self, dgram: Datagram) -> bool:
        data = dgram.data
        if len(data) < endpoint.HEADER_SIZE:
            return False
        try:
            hdr, flow_bytes = endpoint.decode(data)
        except ValueError:
            return False
        if hdr.src_port == REGISTRY_PORT or hdr.dst_port == REGISTRY_PORT:
            return False
        try:
            fh, payload = decode(flow_bytes)
        except MalformedFlowPacket:
            return False
        src = EndpointAddr(dgram.src, hdr.src_port)
        dst = EndpointAddr(dgram.dst, hdr.dst_port)
        if fh.flags & (F_PURE | F_ELN):
            sf = self.flows.get((dst, src))
            if sf is None:
                return False
            sf.last_activity = self.sim.now
            sf.downstream.on_header(fh, payload)
            return True
        sf = self.flows.get((src, dst))
        if sf is None:
            sf = self._create(src, dst)
            if sf is None:
                self.passthrough += 1
                return False
        sf.deposit(fh.seq, payload)
        return True

    def _create(self, src: EndpointAddr, dst: EndpointAddr) -> SplitFlow | None:
        if len(self.flows) >= self.config.max_flows:
            return None
        link = self.node.routes.get(dst.host)
        if link is None:
            return None
        neighbor = link.dst.name
        side = self.config.side(neighbor)
        sf = SplitFlow(self, src, dst, side, neighbor)
        self.flows[(src, dst)] = sf
        self.created += 1
        self.sim.trace("mb_split", self.node.name, f"{src.host}:{src.port}>{dst.host}:{dst.port}")
        self._reshare(neighbor)
        return sf

    def remove_flow(self, key, reason: str = "") -> None:
        sf = self.flows.pop(key, None)
        if sf is None:
            return
        sf.close()
        self.removed += 1
        self.sim.trace("mb_remove", self.node.name, reason)
        self._reshare(sf.neighbor)

    def _reshare(self, neighbor: str) -> None:
        side = self.config.side(neighbor)
        if side.fixed_rate is None:
            return
        members = [sf for sf in self.flows.values() if sf.neighbor == neighbor]
        if not members:
            return
        rate = fixed_window_share(side.fixed_rate, len(members))
        now = self.sim.now
        for sf in members:
            sf.downstream.cc.set_rate(rate, now)

    def _on_sweep(self) -> None:
        limit = int(self.config.idle_timeout_s * NS_PER_S)
        now = self.sim.now
        for key, sf in list(self.flows.items()):
            if not sf.queue.entries and now - sf.last_activity >= limit:
                self.remove_flow(key, "idle")
        self._sweep.start(limit)

    def on_link_loss(self, note) -> None:
        """A packet bound for this node was lost on an ELN link: tell its sender."""
        dgram = note.datagram
        try:
            hdr, flow_bytes = endpoint.decode(dgram.data)
            fh, _ = decode(flow_bytes)
        except ValueError:
            return
        if fh.flags & (F_PURE | F_ELN):
            return
        report = HEADER.pack(fh.seq, 0, F_ELN | F_PURE)
        data = endpoint.encode(hdr.dst_port, hdr.src_port, report)
        self.node.forward(Datagram(dgram.dst, dgram.src, data))

    def shutdown(self) -> None:
        for sf in self.flows.values():
            sf.close()
        self.flows.clear()
        self._sweep.kill()

    def snapshot(self) -> dict:
        return {
            "flows": {f"{k[0].host}:{k[0].port}>{k[1].host}:{k[1].port}": sf.state()
                      for k, sf in sorted(self.flows.items())},
            "passthrough": self.passthrough,
            "created": self.created,
            "removed": self.removed,
        }


class MiddleboxNode(Node):
    """A router that runs a flow middlebox on transit traffic."""

    def __init__(self, net, name, addr=None, config: MiddleboxConfig | None = None):
        super().__init__(net, name, addr)
        self.config = config or MiddleboxConfig()
        self.mb = Middlebox(self, self.config)
        self.crashes = 0

    def intercept(self, dgram: Datagram) -> bool:
        return self.mb.intercept(dgram)

    def on_link_loss(self, note) -> None:
        if not self.crashed:
            self.mb.on_link_loss(note)

    def crash(self) -> None:
        super().crash()
        self.crashes += 1
        self.mb.shutdown()

    def restart(self) -> None:
        super().restart()
        tracer = self.mb.tracer
        self.mb = Middlebox(self, self.config)
        self.mb.tracer = tracer
