"""Nodes, static routing, and the topology container."""

from __future__ import annotations

import json
from collections import deque
from itertools import count

from .engine import Simulator
from .link import Link, LossModel


def format_addr(a: int) -> str:
    return ".".join(str((a >> s) & 0xFF) for s in (24, 16, 8, 0))


class Datagram:
    """A network-layer packet: locators plus the Endpoint-layer bytes.

    No network header is modeled, so the wire size is ``len(data)``.
    """

    __slots__ = ("src", "dst", "data", "uid")

    _uids = count(1)

    def __init__(self, src: int, dst: int, data: bytes):
        self.src = src
        self.dst = dst
        self.data = data
        self.uid = next(Datagram._uids)

    def __len__(self):
        return len(self.data)


class Node:
    """A router. Hosts and middleboxes extend it."""

    def __init__(self, net: "Network", name: str, addr: int | None = None):
        self.net = net
        self.sim: Simulator = net.sim
        self.name = name
        self.addrs: set[int] = set()
        if addr is not None:
            self.addrs.add(addr)
        self.links: dict[str, Link] = {}
        self.routes: dict[int, Link] = {}
        self.crashed = False
        self.no_route = 0
        self.dropped_crashed = 0

    @property
    def addr(self) -> int:
        return min(self.addrs) if self.addrs else 0

    # -- data path -----------------------------------------------------
    def receive(self, dgram: Datagram, link: Link | None = None) -> None:
        if self.crashed:
            self.dropped_crashed += 1
            return
        if dgram.dst in self.addrs:
            self.deliver_local(dgram)
        elif not self.intercept(dgram):
            self.forward(dgram)

    def intercept(self, dgram: Datagram) -> bool:
        return False

    def forward(self, dgram: Datagram) -> None:
        link = self.routes.get(dgram.dst)
        if link is None:
            self.no_route += 1
            self.sim.trace("no_route", self.name, f"{dgram.src}>{dgram.dst}")
            return
        link.transmit(dgram)

    def send(self, dgram: Datagram) -> None:
        """Originate a packet from this node."""
        if self.crashed:
            self.dropped_crashed += 1
            return
        if dgram.dst in self.addrs:
            self.sim.after(0, self.deliver_local, dgram)
        else:
            self.forward(dgram)

    def deliver_local(self, dgram: Datagram) -> None:
        pass

    def on_link_loss(self, note) -> None:
        pass

    def crash(self) -> None:
        self.crashed = True
        self.sim.trace("crash", self.name)

    def restart(self) -> None:
        self.crashed = False
        self.sim.trace("restart", self.name)


class Network:
    def __init__(self, sim: Simulator):
        self.sim = sim
        self.nodes: dict[str, Node] = {}
        self.links: dict[str, Link] = {}
        self._adj: dict[str, list[str]] = {}
        self._next_addr = (10 << 24) + 1

    def alloc_addr(self) -> int:
        a = self._next_addr
        self._next_addr += 1
        return a

    def add_node(self, node_cls=Node, name: str = "", **kw) -> Node:
        if name in self.nodes:
            raise ValueError(f"duplicate node {name!r}")
        node = node_cls(self, name, self.alloc_addr(), **kw)
        self.nodes[name] = node
        self._adj[name] = []
        return node

    def add_link(
        self,
        a: str,
        b: str,
        bandwidth_bps: int,
        prop_delay_ns: int,
        queue_capacity: int,
        loss_model: LossModel | None = None,
        eln_capable: bool = False,
        bandwidth_ba: int | None = None,
        queue_ba: int | None = None,
    ) -> tuple[Link, Link]:
        """Add a duplex link as two independent one-way channels."""
        na, nb = self.nodes[a], self.nodes[b]
        ab = Link(self.sim, f"{a}->{b}", na, nb, bandwidth_bps, prop_delay_ns, queue_capacity,
                  loss_model, eln_capable)
        ba = Link(self.sim, f"{b}->{a}", nb, na, bandwidth_ba or bandwidth_bps, prop_delay_ns,
                  queue_ba if queue_ba is not None else queue_capacity, loss_model, eln_capable)
        self.links[ab.link_id] = ab
        self.links[ba.link_id] = ba
        na.links[b] = ab
        nb.links[a] = ba
        self._adj[a].append(b)
        self._adj[b].append(a)
        return ab, ba

    def compute_routes(self) -> None:
        """Shortest-hop static routes; ties broken by link insertion order."""
        for src in self.nodes:
            first_hop: dict[str, str] = {}
            seen = {src}
            q = deque()
            for nb in self._adj[src]:
                if nb not in seen:
                    seen.add(nb)
                    first_hop[nb] = nb
                    q.append(nb)
            while q:
                cur = q.popleft()
                for nb in self._adj[cur]:
                    if nb not in seen:
                        seen.add(nb)
                        first_hop[nb] = first_hop[cur]
                        q.append(nb)
            node = self.nodes[src]
            node.routes = {}
            for dst, hop in first_hop.items():
                for a in self.nodes[dst].addrs:
                    node.routes[a] = node.links[hop]

    def readdress(self, name: str, new_addr: int | None = None) -> int:
        """Give a node a fresh locator; the old one stops being routable."""
        node = self.nodes[name]
        new_addr = self.alloc_addr() if new_addr is None else new_addr
        old = set(node.addrs)
        node.addrs = {new_addr}
        self.compute_routes()
        self.sim.trace("readdress", name, f"{sorted(old)}->{new_addr}")
        return new_addr

    def node_by_addr(self, addr: int) -> Node | None:
        for n in self.nodes.values():
            if addr in n.addrs:
                return n
        return None

    def report(self) -> "SimulationReport":
        return SimulationReport(
            time_ns=self.sim.now,
            events=self.sim.dispatched,
            links={lid: l.report() for lid, l in sorted(self.links.items())},
            nodes={n: {"no_route": node.no_route, "dropped_crashed": node.dropped_crashed}
                   for n, node in sorted(self.nodes.items())},
        )


class SimulationReport:
    def __init__(self, time_ns: int, events: int, links: dict, nodes: dict):
        self.time_ns = time_ns
        self.events = events
        self.links = links
        self.nodes = nodes

    def drops(self, link_id: str) -> int:
        l = self.links[link_id]
        return l["dropped_queue"] + l["dropped_loss"]

    def to_json(self) -> str:
        return json.dumps({"time_ns": self.time_ns, "events": self.events,
                           "links": self.links, "nodes": self.nodes}, sort_keys=True)
