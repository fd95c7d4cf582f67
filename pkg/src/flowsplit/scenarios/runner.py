"""Build a network from a ScenarioConfig, run it, and collect metric samples."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..host import Host, HostConfig
from ..middlebox import MiddleboxConfig, MiddleboxNode, SideConfig
from ..registry import REGISTRY_PORT
from ..endpoint import EndpointAddr
from ..sim.engine import NS_PER_S, Simulator, millis, seconds
from ..sim.link import LossModel
from ..sim.network import Network, Node
from .apps import CROSS_PORT, CrossFlow, MetricSample, ObservedFlow
from .config import ScenarioConfig, SideSpec

LISTEN_PORT = 7000
CSV_COLUMNS = ("t_s", "flow_id", "goodput_bps", "e2e_delay_ms", "cum_bytes")


@dataclass
class RunResult:
    config: ScenarioConfig
    seed: int
    samples: dict[str, list[MetricSample]]
    observed: dict[str, ObservedFlow]
    cross: dict[str, CrossFlow]
    net: Network
    events: list[tuple[int, str, str]] = field(default_factory=list)
    wall_s: float = 0.0
    # middlebox snapshots taken just before each crash and just after each restart
    snapshots: list[tuple[int, str, str, dict]] = field(default_factory=list)

    @property
    def sim(self) -> Simulator:
        return self.net.sim

    def rows(self):
        for fid in sorted(self.samples):
            for s in self.samples[fid]:
                yield s

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in sorted(self.rows(), key=lambda s: (s.t_ns, s.flow_id)):
            delay = "" if math.isnan(s.e2e_delay_ns) else f"{s.e2e_delay_ms:.3f}"
            w.writerow((f"{s.t_s:.3f}", s.flow_id, f"{s.goodput_bps:.1f}", delay, s.cum_bytes))
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def _side(spec: SideSpec) -> SideConfig:
    return SideConfig(controller=spec.controller, queue_capacity=spec.queue,
                      fixed_rate=spec.fixed_rate, local_recovery=spec.local_recovery)


def build_network(cfg: ScenarioConfig, seed: int) -> Network:
    sim = Simulator(seed=seed)
    net = Network(sim)
    for n in cfg.nodes:
        if n.kind == "host":
            hc = HostConfig(controller=n.controller, local_recovery=n.local_recovery,
                            fixed_rate=n.fixed_rate)
            net.add_node(Host, n.name, config=hc)
        elif n.kind == "middlebox":
            m = cfg.middlebox(n.name)
            mc = MiddleboxConfig()
            if m is not None:
                mc = MiddleboxConfig(sides={k: _side(v) for k, v in m.sides.items()},
                                     default=_side(m.default))
            net.add_node(MiddleboxNode, n.name, config=mc)
        else:
            net.add_node(Node, n.name)
    for l in cfg.links:
        loss = None
        if l.loss:
            loss = LossModel([(seconds(t), p) for t, p in l.loss])
        bw_ba = int(l.bandwidth_ba_bps) if l.bandwidth_ba_bps is not None else None
        net.add_link(l.a, l.b, int(l.bandwidth_bps), millis(l.delay_ms), l.queue, loss,
                     l.eln, bandwidth_ba=bw_ba, queue_ba=l.queue_ba)
    net.compute_routes()
    return net


def run_scenario(cfg: ScenarioConfig, seed: int = 1, duration_s: float | None = None,
                 progress=None, instrument=None) -> RunResult:
    """Run ``cfg`` for ``duration_s`` (default: the config's) simulated seconds.

    ``instrument(net)`` is called once the network is built, before any traffic.
    """
    cfg.validate()
    t0 = time.perf_counter()
    net = build_network(cfg, seed)
    sim = net.sim
    duration = seconds(duration_s if duration_s is not None else cfg.duration_s)
    interval = seconds(cfg.measurement_interval_s)
    log: list[tuple[int, str, str]] = []
    snapshots: list[tuple[int, str, str, dict]] = []
    if instrument is not None:
        instrument(net)

    observed: dict[str, ObservedFlow] = {}
    cross: dict[str, CrossFlow] = {}
    by_src: dict[tuple[str, bytes], ObservedFlow] = {}
    listeners: dict[str, Host] = {}

    registry = None
    if cfg.registry is not None:
        reg_host = net.nodes[cfg.registry]
        reg_host.serve_registry()
        registry = EndpointAddr(reg_host.addr, REGISTRY_PORT)

    for k, f in enumerate(cfg.flows):
        src, dst = net.nodes[f.src], net.nodes[f.dst]
        if f.role == "observed":
            fl = ObservedFlow(f.id, src, dst, f.size_bytes, LISTEN_PORT,
                              use_locator=registry is None)
            observed[f.id] = fl
            by_src[(dst.name, src.id)] = fl
            listeners[dst.name] = dst
        else:
            cross[f.id] = CrossFlow(f.id, src, dst, f.controller, port=CROSS_PORT + k)

    for name, host in listeners.items():
        def on_session(sess, name=name):
            fl = by_src.get((name, sess.remote_id))
            if fl is not None:
                fl.on_peer_session(sess)
        host.listen(LISTEN_PORT, on_session)

    registered: set[str] = set()
    if registry is not None:
        for n in net.nodes.values():
            if isinstance(n, Host):
                n.use_registry(registry)
        for name, host in listeners.items():
            def done(ok, name=name):
                if ok:
                    registered.add(name)
            host.register_self(done)

    def start_observed(fl: ObservedFlow) -> None:
        if registry is not None and fl.dst.name not in registered:
            sim.after(millis(10), start_observed, fl)
            return
        log.append((sim.now, "start", fl.flow_id))
        fl.start()

    for f in cfg.flows:
        if f.role == "observed":
            sim.schedule(seconds(f.start_s), start_observed, observed[f.id])
        else:
            sim.schedule(seconds(f.start_s), cross[f.id].start)

    def fire(ev):
        node = net.nodes[ev.node]
        log.append((sim.now, ev.kind, ev.node))
        if ev.kind == "readdress":
            node.readdress() if isinstance(node, Host) else net.readdress(ev.node)
        elif ev.kind == "crash":
            if isinstance(node, MiddleboxNode):
                snapshots.append((sim.now, "crash", ev.node, node.mb.snapshot()))
            node.crash()
        elif ev.kind == "restart":
            node.restart()
            if isinstance(node, MiddleboxNode):
                snapshots.append((sim.now, "restart", ev.node, node.mb.snapshot()))

    for ev in cfg.events:
        sim.schedule(seconds(ev.t_s), fire, ev)

    meters = [fl.meter for fl in observed.values()] + [c.meter for c in cross.values()]

    def sample():
        for m in meters:
            m.sample(sim.now, interval)
        if progress is not None:
            progress(sim.now / NS_PER_S)
        if sim.now + interval <= duration:
            sim.after(interval, sample)

    sim.schedule(interval, sample)
    sim.run_until(duration)
    samples = {m.flow_id: m.samples for m in meters}
    return RunResult(cfg, seed, samples, observed, cross, net, log,
                     time.perf_counter() - t0, snapshots)
