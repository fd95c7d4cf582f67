"""Shared fixtures: tiny wired topologies and a loopback pair of flow sections."""

from __future__ import annotations

import pytest

from flowsplit.flow import FlowSection, FlowUser
from flowsplit.flowcc import CcConfig, make_controller
from flowsplit.sim.engine import Simulator, millis
from flowsplit.sim.network import Network, Node

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class Sink(Node):
    """A node that records every datagram addressed to it."""

    def __init__(self, net, name, addr=None):
        super().__init__(net, name, addr)
        self.got: list = []

    def deliver_local(self, dgram) -> None:
        self.got.append((self.sim.now, dgram))


def two_node_net(bandwidth=1_000_000, delay_ms=10, queue=10, loss=None, seed=0, eln=False):
    sim = Simulator(seed=seed)
    net = Network(sim)
    a = net.add_node(Sink, "a")
    b = net.add_node(Sink, "b")
    net.add_link("a", "b", bandwidth, millis(delay_ms), queue, loss, eln)
    net.compute_routes()
    return net, a, b


class Recorder(FlowUser):
    """Flow user that supplies ``supply`` payloads and logs every upcall."""

    def __init__(self, supply=0, size=100):
        self.supply = supply
        self.size = size
        self.pulled = 0
        self.delivered: list[bytes] = []
        self.losses: list = []
        self.conditions: list = []

    def flow_pending(self, section):
        return self.pulled < self.supply

    def flow_pull(self, section):
        self.pulled += 1
        return self.pulled.to_bytes(4, "big") + bytes(self.size - 4)

    def flow_deliver(self, section, payload):
        self.delivered.append(payload)

    def flow_loss(self, section, seq, payload, kind):
        self.losses.append((section.sim.now, seq, kind))

    def flow_condition(self, section, cond):
        self.conditions.append((section.sim.now, cond))


class Pair:
    """Two flow sections joined by a fixed-delay wire with a drop predicate.

    ``drop(direction, raw_bytes)`` returns True to lose a packet; direction is
    ``"ab"`` or ``"ba"``.
    """

    def __init__(self, sim=None, delay_ms=10, cc_a="newreno", cc_b="newreno",
                 cfg: CcConfig | None = None, drop=None, local_recovery=False, **cc_kw):
        self.sim = sim or Simulator(seed=0)
        self.delay = millis(delay_ms)
        self.drop = drop or (lambda d, b: False)
        self.ua = Recorder()
        self.ub = Recorder()
        self.wire: list[tuple[int, str, bytes]] = []
        self.a = FlowSection(self.sim, make_controller(cc_a, cfg, **cc_kw),
                             lambda b: self._send("ab", b), self.ua,
                             local_recovery=local_recovery, name="a")
        self.b = FlowSection(self.sim, make_controller(cc_b, cfg, **cc_kw),
                             lambda b: self._send("ba", b), self.ub, name="b")

    def _send(self, d, data):
        self.wire.append((self.sim.now, d, data))
        if self.drop(d, data):
            return
        dst = self.b if d == "ab" else self.a
        self.sim.after(self.delay, dst.on_packet, data)


@pytest.fixture
def pair():
    return Pair()
