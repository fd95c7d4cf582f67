import random

import pytest
from hypothesis import given, settings, strategies as st

from flowsplit import isolation
from flowsplit.flow import FlowCondition
from flowsplit.isolation import (
    Channel,
    ChannelCondition,
    ChannelFailed,
    ChannelUser,
    HostIdentity,
    IdentityMismatch,
    NegotiationFailed,
    Rejected,
    derive_keys,
)
from flowsplit.sim.engine import NS_PER_S, seconds

from conftest import Pair


class Frames(ChannelUser):
    def __init__(self, frames=()):
        self.queue = list(frames)
        self.got = []
        self.conds = []
        self.up = 0
        self.negfail = []

    def channel_pending(self, ch):
        return bool(self.queue)

    def channel_pull(self, ch):
        return self.queue.pop(0) if self.queue else None

    def channel_deliver(self, ch, frame):
        self.got.append(frame)

    def channel_condition(self, ch, cond):
        self.conds.append(cond)

    def channel_established(self, ch):
        self.up += 1

    def channel_negotiation_failed(self, ch, err):
        self.negfail.append((ch.sim.now, err))


ID_A = HostIdentity(b"a" * 32)
ID_B = HostIdentity(b"b" * 32)


def channels(drop=None, expected=ID_B.id, encrypt=False, frames=()):
    p = Pair(drop=drop)
    ua, ub = Frames(frames), Frames()
    ca = Channel(ID_A, p.a, True, random.Random(1), expected_remote=expected,
                 encrypt=encrypt, user=ua, name="a")
    cb = Channel(ID_B, p.b, False, random.Random(2), encrypt=encrypt, user=ub, name="b")
    ca.start()
    return p, ca, cb, ua, ub


def test_handshake_agrees_on_per_direction_keys():
    p, ca, cb, ua, ub = channels()
    p.sim.run_until(seconds(1))
    assert ca.condition is cb.condition is ChannelCondition.ACTIVE
    assert ca.tx_key == cb.rx_key and ca.rx_key == cb.tx_key
    assert ca.tx_key != ca.rx_key
    assert ca.remote == ID_B and cb.remote == ID_A
    assert ua.up == ub.up == 1


def test_frames_cross_in_both_directions():
    p, ca, cb, ua, ub = channels(frames=[b"one", b"two"])
    p.sim.run_until(seconds(1))
    assert ub.got == [b"one", b"two"]
    ub.queue.append(b"back")
    cb.pump()
    p.sim.run_until(seconds(2))
    assert ua.got == [b"back"]


def test_responder_with_the_wrong_identity_is_refused():
    p, ca, cb, ua, ub = channels(expected=HostIdentity(b"z" * 32).id)
    p.sim.run_until(seconds(1))
    assert ca.condition is ChannelCondition.FAILED
    assert [type(e) for _, e in ua.negfail] == [IdentityMismatch]


def test_tampered_response_pub_is_an_identity_mismatch():
    p, ca, cb, ua, ub = channels()
    orig = p.a.on_packet

    def tamper(raw):
        body = raw[12:]
        hs = isolation.parse_handshake(body)
        if hs is not None and hs[0] == isolation.MSG_RESPONSE:
            i = 12 + isolation.HEADER_SIZE + 1
            raw = raw[:i] + bytes([raw[i] ^ 1]) + raw[i + 1:]
        orig(raw)

    p.a.on_packet = tamper
    p.sim.run_until(seconds(1))
    assert ca.condition is ChannelCondition.FAILED
    assert isinstance(ua.negfail[0][1], IdentityMismatch)


def test_three_lost_responses_fail_negotiation_after_seven_seconds():
    def drop(d, raw):
        hs = isolation.parse_handshake(raw[12:])
        return d == "ba" and hs is not None and hs[0] == isolation.MSG_RESPONSE

    p, ca, cb, ua, ub = channels(drop=drop)
    p.sim.run_until(seconds(30))
    assert len(ua.negfail) == 1
    t, err = ua.negfail[0]
    assert isinstance(err, NegotiationFailed)
    # INITs at 0, 1 and 3 s; the last waits 4 s
    assert t == 7 * NS_PER_S
    assert ca.condition is ChannelCondition.FAILED


def established():
    p, ca, cb, ua, ub = channels()
    p.sim.run_until(seconds(1))
    return ca, cb


def test_seal_open_round_trip_and_rejections():
    ca, cb = established()
    pkt = ca.seal(b"hello")
    assert len(pkt) == isolation.HEADER_SIZE + 5
    assert cb.open(pkt) == b"hello"
    assert cb.open(pkt) is Rejected.REPLAY
    bad = pkt[:-1] + bytes([pkt[-1] ^ 0x80])
    assert cb.open(bad) is Rejected.BAD_MAC
    # a packet sealed long ago falls out of the replay window
    old = ca.seal(b"old")
    for _ in range(isolation.REPLAY_WINDOW):
        cb.open(ca.seal(b"x"))
    assert cb.open(old) is Rejected.WINDOW_TOO_OLD
    assert cb.rejected == {Rejected.BAD_MAC: 1, Rejected.REPLAY: 1, Rejected.WINDOW_TOO_OLD: 1}


def test_out_of_order_inside_the_window_is_accepted():
    ca, cb = established()
    pkts = [ca.seal(bytes([i])) for i in range(10)]
    for k in (3, 1, 9, 0, 2):
        assert cb.open(pkts[k]) == bytes([k])


def test_ten_thousand_forgeries_and_replays_are_all_rejected():
    ca, cb = established()
    rng = random.Random(5)
    genuine = [ca.seal(rng.randbytes(40)) for _ in range(50)]
    for pkt in genuine:
        assert not isinstance(cb.open(pkt), Rejected)
    accepted = 0
    for i in range(10_000):
        pkt = bytearray(rng.choice(genuine))
        if i % 2:
            pos = rng.randrange(len(pkt))
            pkt[pos] ^= 1 << rng.randrange(8)
        if not isinstance(cb.open(bytes(pkt)), Rejected):
            accepted += 1
    assert accepted == 0


def test_flow_down_gives_exactly_one_failed_upcall():
    p, ca, cb, ua, ub = channels()
    p.sim.run_until(seconds(1))
    ca.flow_condition(p.a, FlowCondition.DOWN)
    ca.flow_condition(p.a, FlowCondition.DOWN)
    assert ua.conds.count(ChannelCondition.FAILED) == 1
    assert ca.failed_upcalls == 1
    with pytest.raises(ChannelFailed):
        ca.seal(b"x")


def test_stalled_and_active_are_edge_triggered():
    p, ca, cb, ua, ub = channels()
    p.sim.run_until(seconds(1))
    for c in (FlowCondition.UNCERTAIN, FlowCondition.UNCERTAIN, FlowCondition.UP, FlowCondition.UP):
        ca.flow_condition(p.a, c)
    assert ua.conds == [ChannelCondition.STALLED, ChannelCondition.ACTIVE]


def test_seal_before_negotiation_is_refused():
    p = Pair()
    ch = Channel(ID_A, p.a, True, random.Random(0))
    with pytest.raises(ChannelFailed):
        ch.seal(b"x")


def test_encrypted_payload_differs_on_the_wire():
    p, ca, cb, ua, ub = channels(encrypt=True, frames=[b"secret frame"])
    p.sim.run_until(seconds(1))
    assert ub.got == [b"secret frame"]
    assert not any(b"secret frame" in raw for _, _, raw in p.wire)


@settings(max_examples=50)
@given(st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32),
       st.binary(min_size=16, max_size=16), st.binary(min_size=16, max_size=16),
       st.binary(min_size=16, max_size=16))
def test_key_separation(pa, pb, na, nb, nb2):
    k1, k2 = derive_keys(pa, pb, na, nb)
    assert k1 != k2
    if nb2 != nb:
        assert set(derive_keys(pa, pb, na, nb2)).isdisjoint({k1, k2})
