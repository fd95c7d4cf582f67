"""UDP-style Endpoint layer: 8-byte header, port demultiplexing, best-effort delivery."""

from __future__ import annotations

import struct
from typing import Callable, NamedTuple

from .sim.network import Datagram

HEADER = struct.Struct(">HHHH")
HEADER_SIZE = 8
MTU = 1500
EPHEMERAL_BASE = 49152


class EndpointAddr(NamedTuple):
    host: int
    port: int


class EndpointHeader(NamedTuple):
    src_port: int
    dst_port: int
    length: int
    checksum: int


class ChecksumError(ValueError):
    pass


class TruncatedError(ValueError):
    pass


class PortInUse(OSError):
    pass


def ones_complement_sum(data: bytes) -> int:
    """16-bit ones'-complement sum of big-endian words (odd length zero-padded).

    Uses 2**16 == 1 (mod 0xFFFF): the folded sum equals the whole buffer, read
    as one big integer, reduced mod 0xFFFF.
    """
    if len(data) & 1:
        data = data + b"\x00"
    n = int.from_bytes(data, "big")
    s = n % 0xFFFF
    if s == 0 and n != 0:
        return 0xFFFF
    return s


def checksum(header_zeroed: bytes, payload: bytes) -> int:
    # the header is 8 bytes (even), so the two parts can be summed separately
    s = ones_complement_sum(header_zeroed) + ones_complement_sum(payload)
    s = (s & 0xFFFF) + (s >> 16)
    c = ~s & 0xFFFF
    return c or 0xFFFF


def encode(src_port: int, dst_port: int, payload: bytes) -> bytes:
    length = HEADER_SIZE + len(payload)
    if length > 0xFFFF:
        raise ValueError("datagram too long")
    zeroed = HEADER.pack(src_port, dst_port, length, 0)
    return HEADER.pack(src_port, dst_port, length, checksum(zeroed, payload)) + payload


def decode(data: bytes) -> tuple[EndpointHeader, bytes]:
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"{len(data)} bytes < 8-byte header")
    sp, dp, length, csum = HEADER.unpack_from(data)
    if length < HEADER_SIZE or length > len(data):
        raise TruncatedError(f"length field {length} vs {len(data)} bytes")
    payload = data[HEADER_SIZE:length]
    if checksum(HEADER.pack(sp, dp, length, 0), payload) != csum:
        raise ChecksumError("endpoint checksum mismatch")
    return EndpointHeader(sp, dp, length, csum), payload


def peek_ports(data: bytes) -> tuple[int, int]:
    sp, dp = struct.unpack_from(">HH", data)
    return sp, dp


Handler = Callable[[EndpointAddr, EndpointAddr, bytes], None]


class Socket:
    """A bound port. ``handler(local, remote, payload)`` receives datagrams."""

    def __init__(self, layer: "EndpointLayer", port: int, handler: Handler | None):
        self.layer = layer
        self.port = port
        self.handler = handler
        self.closed = False

    @property
    def local(self) -> EndpointAddr:
        return EndpointAddr(self.layer.node.addr, self.port)

    def sendto(self, remote: EndpointAddr, payload: bytes, src_host: int | None = None) -> None:
        self.layer.send(self.port, remote, payload, src_host)

    def close(self) -> None:
        self.closed = True
        self.layer.sockets.pop(self.port, None)


class EndpointLayer:
    """Per-node port table. Driven by the simulator loop only."""

    def __init__(self, node, mtu: int = MTU):
        self.node = node
        self.mtu = mtu
        self.sockets: dict[int, Socket] = {}
        self._next_ephemeral = EPHEMERAL_BASE
        self.unbound_drops = 0
        self.checksum_errors = 0
        self.truncated = 0
        self.sent = 0
        self.received = 0

    def bind(self, port: int, handler: Handler | None = None) -> Socket:
        if port == 0:
            port = self.ephemeral_port()
        if port in self.sockets:
            raise PortInUse(f"port {port} in use on {self.node.name}")
        s = Socket(self, port, handler)
        self.sockets[port] = s
        return s

    def ephemeral_port(self) -> int:
        while True:
            p = self._next_ephemeral
            self._next_ephemeral = p + 1 if p < 0xFFFF else EPHEMERAL_BASE
            if p not in self.sockets:
                return p

    def send(self, src_port: int, remote: EndpointAddr, payload: bytes,
             src_host: int | None = None) -> None:
        if HEADER_SIZE + len(payload) > self.mtu:
            raise ValueError(f"payload of {len(payload)} bytes exceeds MTU {self.mtu}")
        data = encode(src_port, remote.port, payload)
        self.sent += 1
        src = self.node.addr if src_host is None else src_host
        self.node.send(Datagram(src, remote.host, data))

    def on_datagram(self, dgram: Datagram) -> None:
        try:
            hdr, payload = decode(dgram.data)
        except ChecksumError:
            self.checksum_errors += 1
            return
        except TruncatedError:
            self.truncated += 1
            return
        sock = self.sockets.get(hdr.dst_port)
        if sock is None or sock.handler is None:
            self.unbound_drops += 1
            return
        self.received += 1
        sock.handler(EndpointAddr(dgram.dst, hdr.dst_port), EndpointAddr(dgram.src, hdr.src_port),
                     payload)
