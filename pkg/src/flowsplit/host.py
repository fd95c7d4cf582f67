"""End hosts: the full stack (Endpoint, Flow, Isolation, Semantic) on one node.

A host owns one long-term identity. Sessions are addressed by the peer's
identity, not its locator. When a session's channel fails, the side that
opened the session rebuilds it: registry lookup, fresh flow section from a new
ephemeral port, new handshake, then the streams migrate to the new channel.
The other side simply attaches streams to whichever new channel arrives from
the same identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from . import endpoint, isolation
from .endpoint import EndpointAddr, EndpointLayer
from .flow import F_ELN, F_PURE, FlowSection, FlowUser, MalformedFlowPacket, decode
from .flowcc import CcConfig, make_controller
from .isolation import Channel, ChannelUser, HostIdentity
from .registry import RegistryClient, RegistryServer
from .semantic import Session
from .sim.engine import NS_PER_S
from .sim.network import Node

DEFAULT_LISTEN_PORT = 7000


@dataclass
class HostConfig:
    controller: str = "newreno"
    local_recovery: bool = False
    fixed_rate: float | None = None
    cc: CcConfig = field(default_factory=CcConfig)
    encrypt: bool = False
    rebuild_backoff_s: float = 0.5
    rebuild_backoff_max_s: float = 8.0

    def make_cc(self):
        kw = {} if self.fixed_rate is None else {"fixed_rate": self.fixed_rate}
        return make_controller(self.controller, self.cc, **kw)


class FlowEndpoint:
    """A bound port and the flow sections that use it, keyed by remote address.

    ``acceptor(section)`` is consulted for data from an unknown remote. With
    ``accept_any`` false, only isolation INIT packets may open a section, so a
    stale peer never gets acks for packets nobody will read.
    """

    def __init__(self, host: "Host", port: int = 0,
                 acceptor: Callable[[FlowSection], None] | None = None,
                 accept_any: bool = False):
        self.host = host
        self.sock = host.ep.bind(port, self._on_datagram)
        self.port = self.sock.port
        self.acceptor = acceptor
        self.accept_any = accept_any
        self.sections: dict[EndpointAddr, FlowSection] = {}
        self.rejected = 0

    def section(self, remote: EndpointAddr, user: FlowUser | None = None,
                config: HostConfig | None = None) -> FlowSection:
        cfg = config or self.host.config
        port = self.port
        ep = self.host.ep

        def output(b: bytes, remote=remote):
            ep.send(port, remote, b)

        sec = FlowSection(self.host.sim, cfg.make_cc(), output, user,
                          local_recovery=cfg.local_recovery,
                          name=f"{self.host.name}:{port}>{remote.host}:{remote.port}")
        self.sections[remote] = sec
        return sec

    def _on_datagram(self, local: EndpointAddr, remote: EndpointAddr, payload: bytes) -> None:
        sec = self.sections.get(remote)
        if sec is not None and sec.down:
            del self.sections[remote]
            sec = None
        if sec is None:
            if self.acceptor is None or not self._may_open(payload):
                self.rejected += 1
                return
            sec = self.section(remote)
            self.acceptor(sec)
        sec.on_packet(payload)

    def _may_open(self, payload: bytes) -> bool:
        try:
            h, body = decode(payload)
        except MalformedFlowPacket:
            return False
        if h.flags & (F_PURE | F_ELN):
            return False
        return self.accept_any or isolation.is_init(body)

    def eln_report(self, remote: EndpointAddr, seq: int) -> None:
        sec = self.sections.get(remote)
        if sec is not None and not sec.down:
            sec.send_eln_report(seq)

    def close(self) -> None:
        for sec in self.sections.values():
            sec.close()
        self.sections.clear()
        self.sock.close()


class _Negotiation(ChannelUser):
    """Holds a channel until its handshake ends, then hands it to the host."""

    def __init__(self, host: "Host", on_up, on_fail=None):
        self.host = host
        self.on_up = on_up
        self.on_fail = on_fail

    def channel_established(self, ch):
        self.on_up(ch)

    def channel_negotiation_failed(self, ch, err):
        if self.on_fail is not None:
            self.on_fail(ch, err)


class Host(Node):
    def __init__(self, net, name, addr=None, config: HostConfig | None = None):
        super().__init__(net, name, addr)
        self.config = config or HostConfig()
        self.ep = EndpointLayer(self)
        rng = self.sim.rng("identity", name)
        self.identity = HostIdentity(bytes(rng.getrandbits(8) for _ in range(32)))
        self._rng = self.sim.rng("host", name)
        self.flow_ports: dict[int, FlowEndpoint] = {}
        self.sessions: dict[bytes, Session] = {}
        self.registry: RegistryClient | None = None
        self.registry_server: RegistryServer | None = None
        self.listen_port: int | None = None
        self.on_session: Callable[[Session], None] | None = None
        self.stall_reports: list[tuple[int, str]] = []
        self.rebuilds: list[tuple[int, str]] = []
        self._peer_locators: dict[bytes, EndpointAddr] = {}
        self.channels: list[Channel] = []

    @property
    def id(self) -> bytes:
        return self.identity.id

    def deliver_local(self, dgram) -> None:
        self.ep.on_datagram(dgram)

    def on_link_loss(self, note) -> None:
        if self.crashed:
            return
        dgram = note.datagram
        try:
            hdr, flow_bytes = endpoint.decode(dgram.data)
            h, _ = decode(flow_bytes)
        except ValueError:
            return
        if h.flags & (F_PURE | F_ELN):
            return
        fe = self.flow_ports.get(hdr.dst_port)
        if fe is not None:
            fe.eln_report(EndpointAddr(dgram.src, hdr.src_port), h.seq)

    # -- flow ports --------------------------------------------------------
    def flow_port(self, port: int = 0, acceptor=None, accept_any: bool = False) -> FlowEndpoint:
        fe = FlowEndpoint(self, port, acceptor, accept_any)
        self.flow_ports[fe.port] = fe
        return fe

    def close_flow_port(self, fe: FlowEndpoint) -> None:
        self.flow_ports.pop(fe.port, None)
        fe.close()

    # -- registry ------------------------------------------------------------
    def serve_registry(self) -> RegistryServer:
        self.registry_server = RegistryServer(self.sim, self.ep)
        return self.registry_server

    def use_registry(self, server: EndpointAddr) -> None:
        self.registry = RegistryClient(self.sim, self.ep, server)

    def register_self(self, done=None) -> None:
        if self.registry is None or self.listen_port is None:
            return
        self.registry.register(self.id, EndpointAddr(self.addr, self.listen_port), done)

    def readdress(self, new_addr: int | None = None) -> int:
        addr = self.net.readdress(self.name, new_addr)
        self.register_self()
        return addr

    # -- responder -------------------------------------------------------------
    def listen(self, port: int = DEFAULT_LISTEN_PORT,
               on_session: Callable[[Session], None] | None = None) -> FlowEndpoint:
        self.listen_port = port
        self.on_session = on_session
        return self.flow_port(port, acceptor=self._accept)

    def _accept(self, section: FlowSection) -> None:
        ch = Channel(self.identity, section, initiator=False, rng=self._rng,
                     encrypt=self.config.encrypt, name=f"{section.name}/iso",
                     user=_Negotiation(self, self._responder_up))
        self.channels.append(ch)

    def _responder_up(self, ch: Channel) -> None:
        rid = ch.remote.id
        sess = self.sessions.get(rid)
        if sess is None or sess.initiator:
            sess = Session(self.sim, rid, initiator=False, name=f"{self.name}<{ch.remote.short()}")
            sess.on_failed = self._on_session_failed
            self.sessions[rid] = sess
            sess.attach(ch)
            if self.on_session is not None:
                self.on_session(sess)
        else:
            sess.attach(ch)

    # -- initiator ---------------------------------------------------------------
    def connect(self, remote_id: bytes, locator: EndpointAddr | None = None,
                on_ready: Callable[[Session], None] | None = None) -> Session:
        sess = Session(self.sim, remote_id, initiator=True,
                       name=f"{self.name}>{remote_id.hex()[:8]}")
        sess.on_failed = self._on_session_failed
        sess.on_ready = on_ready
        self.sessions[remote_id] = sess
        if locator is not None:
            self._peer_locators[remote_id] = locator
        self._establish(sess)
        return sess

    def _establish(self, sess: Session) -> None:
        if self.registry is not None:
            def got(res):
                if isinstance(res, Exception):
                    self._retry(sess, f"lookup: {type(res).__name__}")
                else:
                    self._peer_locators[sess.remote_id] = res
                    self._negotiate(sess, res)
            self.registry.lookup(sess.remote_id, got)
        else:
            loc = self._peer_locators.get(sess.remote_id)
            if loc is None:
                raise ValueError("no locator and no registry to find one")
            self._negotiate(sess, loc)

    def _negotiate(self, sess: Session, loc: EndpointAddr) -> None:
        fe = self.flow_port(0)
        sec = fe.section(loc)

        def up(ch):
            sess.rebuild_attempt = 0
            self.rebuilds.append((self.sim.now, "attached"))
            sess.attach(ch)
            cb = sess.on_ready
            if cb is not None:
                sess.on_ready = None
                cb(sess)

        def failed(ch, err):
            self.close_flow_port(fe)
            self._retry(sess, f"negotiate: {type(err).__name__}")

        ch = Channel(self.identity, sec, initiator=True, rng=self._rng,
                     expected_remote=sess.remote_id, encrypt=self.config.encrypt,
                     name=f"{sec.name}/iso", user=_Negotiation(self, up, failed))
        ch.flow_port = fe
        self.channels.append(ch)
        ch.start()

    def _retry(self, sess: Session, why: str) -> None:
        sess.rebuild_attempt += 1
        delay = min(self.config.rebuild_backoff_s * 2 ** (sess.rebuild_attempt - 1),
                    self.config.rebuild_backoff_max_s)
        self.rebuilds.append((self.sim.now, why))
        self.sim.after(int(delay * NS_PER_S), self._establish, sess)

    def _on_session_failed(self, sess: Session, ch: Channel) -> None:
        self.stall_reports.append((self.sim.now, sess.name))
        fe = getattr(ch, "flow_port", None)
        if fe is not None:
            self.close_flow_port(fe)
        if sess.initiator:
            self.rebuilds.append((self.sim.now, "rebuild"))
            self._establish(sess)
