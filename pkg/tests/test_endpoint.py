import pytest
from hypothesis import given, strategies as st

from flowsplit import endpoint
from flowsplit.endpoint import (
    ChecksumError,
    EndpointAddr,
    EndpointLayer,
    PortInUse,
    TruncatedError,
)

from conftest import two_node_net


def brute_checksum(data: bytes) -> int:
    """Word-by-word ones'-complement sum with an end-around carry after every add."""
    if len(data) % 2:
        data += b"\x00"
    s = 0
    for i in range(0, len(data), 2):
        s += (data[i] << 8) | data[i + 1]
        s = (s & 0xFFFF) + (s >> 16)
    c = ~s & 0xFFFF
    return c or 0xFFFF


@given(st.integers(0, 0xFFFF), st.integers(0, 0xFFFF), st.binary(max_size=600))
def test_checksum_matches_brute_force(sp, dp, payload):
    wire = endpoint.encode(sp, dp, payload)
    zeroed = wire[:6] + b"\x00\x00" + wire[8:]
    assert int.from_bytes(wire[6:8], "big") == brute_checksum(zeroed)


@given(st.integers(0, 0xFFFF), st.integers(0, 0xFFFF), st.binary(max_size=1492))
def test_codec_round_trip(sp, dp, payload):
    wire = endpoint.encode(sp, dp, payload)
    assert len(wire) == 8 + len(payload)
    hdr, body = endpoint.decode(wire)
    assert (hdr.src_port, hdr.dst_port, hdr.length) == (sp, dp, len(wire))
    assert body == payload


@given(st.binary(min_size=1, max_size=200), st.data())
def test_any_single_bit_flip_is_detected(payload, data):
    wire = bytearray(endpoint.encode(1234, 80, payload))
    bit = data.draw(st.integers(0, 8 * len(payload) - 1))
    wire[8 + bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(ChecksumError):
        endpoint.decode(bytes(wire))


def test_header_is_eight_bytes():
    assert endpoint.HEADER_SIZE == 8
    assert len(endpoint.encode(1, 2, b"")) == 8


def test_truncated():
    with pytest.raises(TruncatedError):
        endpoint.decode(b"\x00" * 7)
    wire = endpoint.encode(1, 2, b"abcd")
    with pytest.raises(TruncatedError):
        endpoint.decode(wire[:-1])


def _layers():
    net, a, b = two_node_net()
    la, lb = EndpointLayer(a), EndpointLayer(b)
    a.deliver_local = la.on_datagram
    b.deliver_local = lb.on_datagram
    return net, a, b, la, lb


def test_bind_twice_fails():
    net, a, b, la, lb = _layers()
    la.bind(7)
    with pytest.raises(PortInUse):
        la.bind(7)


def test_send_to_bound_port_is_received():
    net, a, b, la, lb = _layers()
    got = []
    lb.bind(7, lambda local, remote, p: got.append((local, remote, p)))
    sa = la.bind(0)
    sa.sendto(EndpointAddr(b.addr, 7), b"hello")
    net.sim.run()
    assert got == [(EndpointAddr(b.addr, 7), EndpointAddr(a.addr, sa.port), b"hello")]


def test_send_to_unbound_port_is_counted():
    net, a, b, la, lb = _layers()
    la.bind(5).sendto(EndpointAddr(b.addr, 9), b"x")
    net.sim.run()
    assert lb.unbound_drops == 1
    assert lb.received == 0


def test_payload_over_mtu_is_refused():
    net, a, b, la, lb = _layers()
    s = la.bind(5)
    with pytest.raises(ValueError):
        s.sendto(EndpointAddr(b.addr, 9), bytes(1493))


def test_ephemeral_ports_skip_bound_ones():
    net, a, b, la, lb = _layers()
    la.bind(endpoint.EPHEMERAL_BASE)
    s = la.bind(0)
    assert s.port == endpoint.EPHEMERAL_BASE + 1
