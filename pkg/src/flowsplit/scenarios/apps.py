"""Traffic applications and per-flow metric collection.

Observed flows run over the full stack: a bulk sender feeds a semantic stream
through its pull-writer, and the receiver reads in order. Every chunk's write
time is recorded, so each delivered byte's one-way application delay is its
read time minus its write time.

Cross traffic runs directly on flow sections: greedy, congestion controlled,
unreliable, 1480-byte payloads stamped with their send time.
"""

from __future__ import annotations

import hashlib
import math
import struct
from collections import deque
from dataclasses import dataclass

from ..endpoint import EndpointAddr
from ..flow import FlowSection, FlowUser
from ..host import FlowEndpoint, Host, HostConfig
from ..semantic import Session, Stream
from ..sim.engine import NS_PER_S, Simulator

PATTERN_BYTES = 1 << 16
CROSS_PAYLOAD = 1480
CROSS_PORT = 9000
STAMP = struct.Struct(">q")
STALL_GAP_NS = NS_PER_S // 2


@dataclass
class MetricSample:
    t_ns: int
    flow_id: str
    goodput_bps: float
    e2e_delay_ns: float  # NaN when nothing was delivered in the interval
    cum_bytes: int

    @property
    def t_s(self) -> float:
        return self.t_ns / NS_PER_S

    @property
    def e2e_delay_ms(self) -> float:
        return self.e2e_delay_ns / 1e6


class FlowMeter:
    """Accumulates delivered bytes and byte-weighted delay between samples."""

    def __init__(self, flow_id: str):
        self.flow_id = flow_id
        self.cum_bytes = 0
        self._last_bytes = 0
        self._delay_sum = 0.0
        self._delay_bytes = 0
        self.samples: list[MetricSample] = []

    def record(self, nbytes: int, delay_ns: int) -> None:
        self.cum_bytes += nbytes
        self._delay_sum += nbytes * delay_ns
        self._delay_bytes += nbytes

    def sample(self, t_ns: int, interval_ns: int) -> MetricSample:
        d = self.cum_bytes - self._last_bytes
        delay = self._delay_sum / self._delay_bytes if self._delay_bytes else math.nan
        s = MetricSample(t_ns, self.flow_id, d * 8 * NS_PER_S / interval_ns, delay,
                         self.cum_bytes)
        self._last_bytes = self.cum_bytes
        self._delay_sum = 0.0
        self._delay_bytes = 0
        self.samples.append(s)
        return s


class Pattern:
    """Deterministic stream content: a seeded 64 KiB block repeated forever."""

    def __init__(self, sim: Simulator, key: str):
        rng = sim.rng("pattern", key)
        self.block = rng.randbytes(PATTERN_BYTES) * 2

    def at(self, offset: int, n: int) -> bytes:
        o = offset % PATTERN_BYTES
        if n <= PATTERN_BYTES:
            return self.block[o:o + n]
        return bytes(self.block[(offset + k) % PATTERN_BYTES] for k in range(n))


class BulkSender:
    """Writes ``size`` bytes (or forever when ``size`` is None) into a stream."""

    def __init__(self, sim: Simulator, pattern: Pattern, size: int | None = None):
        self.sim = sim
        self.pattern = pattern
        self.size = size
        self.written = 0
        self.digest = hashlib.sha256()
        self.ledger: deque[tuple[int, int]] = deque()  # (end offset, write time)
        self.stream: Stream | None = None

    def attach(self, stream: Stream) -> None:
        self.stream = stream
        stream.source = self._pull
        stream.session.request_pump()

    def _pull(self, stream: Stream, n: int) -> bytes:
        if self.size is not None:
            n = min(n, self.size - self.written)
            if n <= 0:
                return b""
        chunk = self.pattern.at(self.written, n)
        self.written += n
        self.digest.update(chunk)
        self.ledger.append((self.written, self.sim.now))
        return chunk

    @property
    def complete(self) -> bool:
        return self.size is not None and self.written >= self.size


class BulkReceiver:
    """Reads a stream in order, hashing it and charging delay per byte."""

    def __init__(self, sim: Simulator, sender: BulkSender, meter: FlowMeter):
        self.sim = sim
        self.sender = sender
        self.meter = meter
        self.read = 0
        self.digest = hashlib.sha256()
        self.eof_at: int | None = None
        self.last_read_at: int | None = None
        self.stalls: list[tuple[int, int]] = []  # (last read before gap, first read after)

    def attach(self, stream: Stream) -> None:
        stream.on_readable = self._on_readable

    def _on_readable(self, stream: Stream) -> None:
        data = stream.read()
        if data:
            now = self.sim.now
            if self.last_read_at is not None and now - self.last_read_at >= STALL_GAP_NS:
                self.stalls.append((self.last_read_at, now))
            self.last_read_at = now
            self.digest.update(data)
            self._charge(len(data))
        if stream.eof and self.eof_at is None:
            self.eof_at = self.sim.now

    def _charge(self, n: int) -> None:
        now = self.sim.now
        ledger = self.sender.ledger
        pos = self.read
        end = pos + n
        while pos < end:
            chunk_end, t = ledger[0]
            take = min(chunk_end, end) - pos
            self.meter.record(take, now - t)
            pos += take
            if pos >= chunk_end:
                ledger.popleft()
        self.read = end

    @property
    def intact(self) -> bool:
        return self.digest.digest() == self.sender.digest.digest()


class ObservedFlow:
    """Wires a bulk transfer between two hosts over a session."""

    def __init__(self, flow_id: str, src: Host, dst: Host, size: int | None,
                 listen_port: int, use_locator: bool):
        self.flow_id = flow_id
        self.src = src
        self.dst = dst
        sim = src.sim
        self.meter = FlowMeter(flow_id)
        self.sender = BulkSender(sim, Pattern(sim, flow_id), size)
        self.receiver = BulkReceiver(sim, self.sender, self.meter)
        self.listen_port = listen_port
        self.use_locator = use_locator
        self.session: Session | None = None
        self.started_at: int | None = None

    def start(self) -> None:
        self.started_at = self.src.sim.now
        loc = EndpointAddr(self.dst.addr, self.listen_port) if self.use_locator else None
        self.session = self.src.connect(self.dst.id, loc, on_ready=self._ready)

    def _ready(self, sess: Session) -> None:
        self.sender.attach(sess.open_stream())

    def on_peer_session(self, sess: Session) -> None:
        def on_stream(st: Stream) -> None:
            self.receiver.attach(st)
        sess.on_stream = on_stream


class CrossSource(FlowUser):
    """Greedy flow-level sender; every payload carries its send time."""

    def __init__(self, sim: Simulator):
        self.sim = sim
        self.sent = 0
        self._pad = bytes(CROSS_PAYLOAD - STAMP.size)

    def flow_pending(self, section: FlowSection) -> bool:
        return True

    def flow_pull(self, section: FlowSection) -> bytes:
        self.sent += 1
        return STAMP.pack(self.sim.now) + self._pad


class CrossSink(FlowUser):
    def __init__(self, sim: Simulator, meter: FlowMeter):
        self.sim = sim
        self.meter = meter

    def flow_deliver(self, section: FlowSection, payload: bytes) -> None:
        if len(payload) >= STAMP.size:
            (t,) = STAMP.unpack_from(payload)
            self.meter.record(len(payload), self.sim.now - t)


class CrossFlow:
    def __init__(self, flow_id: str, src: Host, dst: Host, controller: str,
                 port: int = CROSS_PORT):
        self.flow_id = flow_id
        self.src = src
        self.dst = dst
        sim = src.sim
        self.meter = FlowMeter(flow_id)
        self.source = CrossSource(sim)
        self.config = HostConfig(controller=controller)
        self.port = port
        self.sink_ep: FlowEndpoint | None = None
        self.section: FlowSection | None = None

    def start(self) -> None:
        sink = CrossSink(self.dst.sim, self.meter)
        cfg = self.config
        # one sink port per cross flow, so each sink meters only its own flow

        def accept(sec: FlowSection) -> None:
            sec.user = sink

        self.sink_ep = self.dst.flow_port(self.port, acceptor=accept, accept_any=True)
        fe = self.src.flow_port(0)
        self.section = fe.section(EndpointAddr(self.dst.addr, self.port), self.source, cfg)
        self.section.pump()
