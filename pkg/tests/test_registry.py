import pytest

from flowsplit.endpoint import EndpointAddr
from flowsplit.host import Host
from flowsplit.registry import (
    REGISTRY_PORT,
    LookupFailed,
    NotFound,
    RegistryServer,
    encode_lookup,
    encode_register,
)
from flowsplit.sim.engine import NS_PER_S, Simulator, millis, seconds
from flowsplit.sim.link import LossModel
from flowsplit.sim.network import Network

ID1 = b"1" * 32
ID2 = b"2" * 32


def star(loss=None):
    """Hosts a, b and registry r around a router; ``loss`` applies to r's link."""
    sim = Simulator(seed=1)
    net = Network(sim)
    a = net.add_node(Host, "a")
    b = net.add_node(Host, "b")
    r = net.add_node(Host, "r")
    net.add_node(Host, "rt")
    net.add_link("a", "rt", 10_000_000, millis(5), 100)
    net.add_link("b", "rt", 10_000_000, millis(5), 100)
    net.add_link("r", "rt", 10_000_000, millis(5), 100, loss)
    net.compute_routes()
    r.serve_registry()
    srv = EndpointAddr(r.addr, REGISTRY_PORT)
    a.use_registry(srv)
    b.use_registry(srv)
    return net, a, b, r


def lookup(net, host, ident, until_s=20):
    out = []
    host.registry.lookup(ident, lambda res: out.append((net.sim.now, res)))
    net.sim.run_until(net.sim.now + seconds(until_s))
    assert len(out) == 1
    return out[0]


def test_latest_registration_wins():
    net, a, b, r = star()
    b.registry.register(ID1, EndpointAddr(1, 1))
    net.sim.run_until(seconds(1))
    b.registry.register(ID1, EndpointAddr(2, 2))
    net.sim.run_until(seconds(2))
    assert lookup(net, a, ID1)[1] == EndpointAddr(2, 2)


def test_identities_are_independent():
    net, a, b, r = star()
    b.registry.register(ID1, EndpointAddr(1, 1))
    b.registry.register(ID2, EndpointAddr(2, 2))
    net.sim.run_until(seconds(1))
    assert lookup(net, a, ID1)[1] == EndpointAddr(1, 1)
    assert lookup(net, a, ID2)[1] == EndpointAddr(2, 2)


def test_unknown_identity_is_not_found():
    net, a, b, r = star()
    t, res = lookup(net, a, ID1)
    assert isinstance(res, NotFound)
    assert t < seconds(1)
    with pytest.raises(NotFound):
        r.registry_server.lookup(ID1)


def test_lost_request_is_retried_after_one_second():
    # the registry's link drops everything for the first half second
    net, a, b, r = star(LossModel([(0, 1.0), (millis(500), 0.0)]))
    done = []
    b.registry.register(ID1, EndpointAddr(3, 3), done.append)
    net.sim.run_until(seconds(3))
    assert done == [True]
    assert b.registry.sent == 2
    t, res = lookup(net, a, ID1)
    assert res == EndpointAddr(3, 3)


def test_unreachable_registry_fails_after_seven_seconds():
    net, a, b, r = star(LossModel([(0, 1.0)]))
    t, res = lookup(net, a, ID1)
    assert isinstance(res, LookupFailed)
    assert t == 7 * NS_PER_S
    assert a.registry.sent == 3


def test_malformed_requests_are_counted():
    sim = Simulator()
    net = Network(sim)
    r = net.add_node(Host, "r")
    q = net.add_node(Host, "q")
    net.add_link("r", "q", 1_000_000, millis(1), 10)
    net.compute_routes()
    srv = RegistryServer(sim, r.ep)
    s = q.ep.bind(0)
    dst = EndpointAddr(r.addr, REGISTRY_PORT)
    for bad in (b"", b"\x10short", encode_lookup(ID1)[:-1], b"\x99" + ID1):
        s.sendto(dst, bad)
    s.sendto(dst, encode_register(ID1, EndpointAddr(9, 9)))
    sim.run()
    assert srv.malformed == 4
    assert srv.lookup(ID1) == EndpointAddr(9, 9)


def test_stale_locator_recovers_once_the_peer_reregisters():
    net, a, b, r = star()
    sim = net.sim
    got = bytearray()

    def on_session(sess):
        sess.on_stream = lambda st: setattr(st, "on_readable", lambda s: got.extend(s.read()))

    b.listen(7000, on_session)
    b.register_self()
    data = bytes(range(256)) * 4000

    def ready(sess):
        sess.open_stream().write(data)

    sim.after(millis(100), lambda: a.connect(b.id, on_ready=ready))
    sim.run_until(millis(300))
    # b moves without telling the registry, then re-registers at 3 s
    net.readdress("b")
    sim.after(seconds(3), b.register_self)
    sim.run_until(seconds(60))
    assert bytes(got) == data
    assert len(a.stall_reports) == 1
    attached = [t for t, why in a.rebuilds if why == "attached"]
    assert len(attached) == 2
    assert attached[1] > seconds(3)
