"""Registration protocol: map host identities to their current locators.

Datagrams on port 3737, raw over the Endpoint layer:

- ``0x10 REGISTER  identity(32) host(u32) port(u16)`` answered by ``0x11 REG_OK``
- ``0x12 LOOKUP    identity(32)`` answered by ``0x13 LOOKUP_OK host port`` or ``0x14 NOT_FOUND``

Every request goes out from a fresh ephemeral port, so a reply identifies its
request without a transaction id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

from .endpoint import EndpointAddr, EndpointLayer
from .sim.engine import NS_PER_S, Simulator

REGISTRY_PORT = 3737
REGISTER = 0x10
REG_OK = 0x11
LOOKUP = 0x12
LOOKUP_OK = 0x13
NOT_FOUND = 0x14

ID_SIZE = 32
LOCATOR = struct.Struct(">IH")
RETRY_BACKOFF_S = (1.0, 2.0, 4.0)


class LookupFailed(RuntimeError):
    pass


class NotFound(LookupError):
    pass


@dataclass
class RegistryRecord:
    identity: bytes
    locator: EndpointAddr
    registered_at: int


def encode_register(identity: bytes, loc: EndpointAddr) -> bytes:
    return bytes([REGISTER]) + identity + LOCATOR.pack(loc.host, loc.port)


def encode_lookup(identity: bytes) -> bytes:
    return bytes([LOOKUP]) + identity


class RegistryServer:
    """Runs on a node's Endpoint layer, bound to the well-known port."""

    def __init__(self, sim: Simulator, ep: EndpointLayer, port: int = REGISTRY_PORT):
        self.sim = sim
        self.ep = ep
        self.records: dict[bytes, RegistryRecord] = {}
        self.requests = 0
        self.malformed = 0
        self.sock = ep.bind(port, self._on_datagram)

    def register(self, identity: bytes, loc: EndpointAddr) -> None:
        self.records[identity] = RegistryRecord(identity, loc, self.sim.now)
        self.sim.trace("registry_register", self.ep.node.name,
                       f"{identity.hex()[:8]}={loc.host}:{loc.port}")

    def lookup(self, identity: bytes) -> EndpointAddr:
        rec = self.records.get(identity)
        if rec is None:
            raise NotFound(identity.hex()[:8])
        return rec.locator

    def _on_datagram(self, local: EndpointAddr, remote: EndpointAddr, payload: bytes) -> None:
        self.requests += 1
        if not payload:
            self.malformed += 1
            return
        kind = payload[0]
        if kind == REGISTER and len(payload) == 1 + ID_SIZE + LOCATOR.size:
            ident = payload[1:1 + ID_SIZE]
            host, port = LOCATOR.unpack_from(payload, 1 + ID_SIZE)
            self.register(ident, EndpointAddr(host, port))
            self.sock.sendto(remote, bytes([REG_OK]))
        elif kind == LOOKUP and len(payload) == 1 + ID_SIZE:
            rec = self.records.get(payload[1:])
            if rec is None:
                self.sock.sendto(remote, bytes([NOT_FOUND]))
            else:
                self.sock.sendto(remote, bytes([LOOKUP_OK]) + LOCATOR.pack(*rec.locator))
        else:
            self.malformed += 1


class RegistryClient:
    """Issues requests with three attempts, waiting 1 s, 2 s and 4 s for replies."""

    def __init__(self, sim: Simulator, ep: EndpointLayer, server: EndpointAddr,
                 backoff_s: tuple[float, ...] = RETRY_BACKOFF_S):
        self.sim = sim
        self.ep = ep
        self.server = server
        self.backoff = tuple(int(b * NS_PER_S) for b in backoff_s)
        self.sent = 0

    def register(self, identity: bytes, loc: EndpointAddr,
                 done: Callable[[bool], None] | None = None) -> None:
        def on_reply(p: bytes | None):
            if done is not None:
                done(p is not None and p[:1] == bytes([REG_OK]))

        self._request(encode_register(identity, loc), on_reply)

    def lookup(self, identity: bytes,
               done: Callable[[EndpointAddr | Exception], None]) -> None:
        def on_reply(p: bytes | None):
            if p is None:
                done(LookupFailed(f"no reply for {identity.hex()[:8]}"))
            elif p[0] == LOOKUP_OK and len(p) == 1 + LOCATOR.size:
                done(EndpointAddr(*LOCATOR.unpack_from(p, 1)))
            else:
                done(NotFound(identity.hex()[:8]))

        self._request(encode_lookup(identity), on_reply)

    def _request(self, payload: bytes, on_reply: Callable[[bytes | None], None]) -> None:
        state = {"attempt": 0, "done": False, "sock": None, "timer": None}

        def finish(p):
            if state["done"]:
                return
            state["done"] = True
            self.sim.cancel(state["timer"])
            if state["sock"] is not None:
                state["sock"].close()
            on_reply(p)

        def on_datagram(local, remote, p):
            if remote == self.server and p:
                finish(p)

        def attempt():
            if state["done"]:
                return
            k = state["attempt"]
            if k >= len(self.backoff):
                finish(None)
                return
            state["attempt"] = k + 1
            if state["sock"] is not None:
                state["sock"].close()
            state["sock"] = self.ep.bind(0, on_datagram)
            self.sent += 1
            state["sock"].sendto(self.server, payload)
            state["timer"] = self.sim.after(self.backoff[k], attempt)

        attempt()
