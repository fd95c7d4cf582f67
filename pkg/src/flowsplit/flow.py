"""Flow Regulation layer: sequenced, congestion-controlled, unreliable, unordered.

A ``FlowSection`` is one congestion-control loop between two flow-speaking
entities (two hosts, or a host and a middlebox). It is both a sender and a
receiver: data it sends is acked by the peer's section, and data it receives
is acked back with a 24-bit bitmap.

The layer above is pulled, not pushed: ``pump`` asks ``user.flow_pull`` for one
payload per unit of transmit allowance. ``send`` is the push variant for
callers that keep their own queue.
"""

from __future__ import annotations

import struct
from bisect import bisect_right, insort
from collections import OrderedDict
from enum import Enum
from typing import Callable

from .flowcc import Controller, LossKind
from .sim.engine import Simulator, Timer

HEADER = struct.Struct(">III")
HEADER_SIZE = 12
ACK_WINDOW = 24
ACKMAP_MASK = (1 << ACK_WINDOW) - 1
DUP_THRESHOLD = 3
DOWN_AFTER = 4

F_ACK = 0x01
F_ELN = 0x02
F_PURE = 0x04


class FlowHeader:
    __slots__ = ("seq", "ack", "ackmap", "flags")

    def __init__(self, seq: int = 0, ack: int = 0, ackmap: int = 0, flags: int = 0):
        self.seq = seq
        self.ack = ack
        self.ackmap = ackmap
        self.flags = flags

    @property
    def is_pure(self) -> bool:
        return bool(self.flags & F_PURE)

    @property
    def is_eln(self) -> bool:
        return bool(self.flags & F_ELN)

    def acked_seqs(self) -> list[int]:
        """Sequences this header reports as received, highest first."""
        if not self.flags & F_ACK:
            return []
        out = [self.ack]
        m = self.ackmap
        i = 0
        while m:
            if m & 1:
                out.append(self.ack - 1 - i)
            m >>= 1
            i += 1
        return out

    def __eq__(self, other):
        return isinstance(other, FlowHeader) and (
            self.seq, self.ack, self.ackmap, self.flags) == (
            other.seq, other.ack, other.ackmap, other.flags)

    def __repr__(self):
        return (f"FlowHeader(seq={self.seq}, ack={self.ack}, "
                f"ackmap={self.ackmap:#08x}, flags={self.flags:#04x})")


class MalformedFlowPacket(ValueError):
    pass


class SendOnDownSection(RuntimeError):
    pass


BLOCKED = None


def encode_header(h: FlowHeader) -> bytes:
    if not 0 <= h.ackmap <= ACKMAP_MASK:
        raise ValueError("ackmap must fit in 24 bits")
    return HEADER.pack(h.seq, h.ack, (h.ackmap << 8) | (h.flags & 0xFF))


def decode(data: bytes) -> tuple[FlowHeader, bytes]:
    if len(data) < HEADER_SIZE:
        raise MalformedFlowPacket(f"{len(data)} bytes < 12-byte flow header")
    seq, ack, tail = HEADER.unpack_from(data)
    flags = tail & 0xFF
    if flags & ~(F_ACK | F_ELN | F_PURE):
        raise MalformedFlowPacket(f"unknown flow flags {flags:#x}")
    h = FlowHeader(seq, ack, tail >> 8, flags)
    if (flags & (F_PURE | F_ELN)) and len(data) != HEADER_SIZE:
        raise MalformedFlowPacket("pure-ack packet carries a payload")
    return h, data[HEADER_SIZE:]


class FlowCondition(Enum):
    UP = "up"
    UNCERTAIN = "uncertain"
    DOWN = "down"


class FlowUser:
    """Upcall interface. Every method receives the calling section."""

    def flow_pending(self, section: "FlowSection") -> bool:
        return False

    def flow_pull(self, section: "FlowSection") -> bytes | None:
        return None

    def flow_sent(self, section: "FlowSection", seq: int) -> None:
        pass

    def flow_deliver(self, section: "FlowSection", payload: bytes) -> None:
        pass

    def flow_loss(self, section: "FlowSection", seq: int, payload: bytes | None,
                  kind: LossKind) -> None:
        pass

    def flow_condition(self, section: "FlowSection", cond: FlowCondition) -> None:
        pass


class FlowReceiver:
    """Receive-side state: highest sequence seen plus a 24-bit history bitmap."""

    __slots__ = ("highest", "bitmap", "resets")

    def __init__(self):
        self.highest = 0
        self.bitmap = 0
        self.resets = 0

    def accept(self, seq: int) -> bool:
        """Record ``seq``; False if it is a duplicate inside the ack window."""
        h = self.highest
        if seq > h:
            shift = seq - h
            if h == 0:
                self.bitmap = 0
            elif shift > ACK_WINDOW:
                self.bitmap = 0
            else:
                self.bitmap = ((self.bitmap << shift) | (1 << (shift - 1))) & ACKMAP_MASK
            self.highest = seq
            return True
        if seq == h:
            return False
        i = h - 1 - seq
        if i < ACK_WINDOW:
            bit = 1 << i
            if self.bitmap & bit:
                return False
            self.bitmap |= bit
            return True
        # Far behind the window: the peer restarted its sequence space.
        self.resets += 1
        self.highest = seq
        self.bitmap = 0
        return True

    def ack_header(self) -> FlowHeader:
        return FlowHeader(0, self.highest, self.bitmap, F_ACK | F_PURE)

    def received(self, seq: int) -> bool:
        if seq == self.highest:
            return self.highest > 0
        i = self.highest - 1 - seq
        return 0 <= i < ACK_WINDOW and bool(self.bitmap >> i & 1)


class FlowStats:
    __slots__ = ("data_sent", "probes_sent", "acks_sent", "data_received", "delivered",
                 "duplicates", "malformed", "losses_gap", "losses_timeout", "losses_eln",
                 "local_retransmits", "grants", "timeouts", "bytes_delivered")

    def __init__(self):
        for k in self.__slots__:
            setattr(self, k, 0)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__slots__}


Output = Callable[[bytes], None]


class FlowSection:
    """One section of a flow path.

    ``output(bytes)`` puts an encoded flow packet on the wire toward the peer.
    ``user`` receives upcalls. ``local_recovery`` turns on retransmission of
    link-reported losses under fresh sequence numbers.
    """

    def __init__(self, sim: Simulator, cc: Controller, output: Output,
                 user: FlowUser | None = None, local_recovery: bool = False,
                 name: str = "", keepalive: bool = True):
        self.sim = sim
        self.cc = cc
        self.output = output
        self.user = user or FlowUser()
        self.local_recovery = local_recovery
        self.name = name
        self.keepalive = keepalive
        self.next_seq = 1
        # seq -> [send_time, payload, is_probe]
        self.in_flight: OrderedDict[int, list] = OrderedDict()
        self._acked_above: list[int] = []
        self.recovery_point = 0
        self.receiver = FlowReceiver()
        self.condition = FlowCondition.UP
        self.consecutive_timeouts = 0
        self.ever_sent = False
        self.stats = FlowStats()
        self.max_in_flight = 0
        self._pumping = False
        self._rto_timer = Timer(sim, self._on_rto)
        self._idle_timer = Timer(sim, self._on_idle)
        self._wake_timer = Timer(sim, self.pump)
        self.trace_sends: list | None = None

    # -- sending -------------------------------------------------------
    @property
    def down(self) -> bool:
        return self.condition is FlowCondition.DOWN

    def allowance(self) -> int:
        return self.cc.allowance(len(self.in_flight), self.sim.now)

    def send(self, payload: bytes) -> int | None:
        """Push one payload. Returns its sequence number, or ``BLOCKED``."""
        if self.down:
            raise SendOnDownSection(f"section {self.name} is down")
        if self.allowance() <= 0:
            self._arm_wake()
            return BLOCKED
        return self._transmit(payload, False)

    def pump(self) -> int:
        """Pull payloads from the user while allowance lasts. Returns packets sent."""
        if self._pumping or self.down:
            return 0
        self._pumping = True
        sent = 0
        cc = self.cc
        user = self.user
        try:
            while True:
                now = self.sim.now
                if cc.allowance(len(self.in_flight), now) <= 0:
                    if not cc.window_based and user.flow_pending(self):
                        self._arm_wake()
                    break
                if not user.flow_pending(self):
                    break
                self.stats.grants += 1
                payload = user.flow_pull(self)
                if payload is None:
                    break
                seq = self._transmit(payload, False)
                sent += 1
                user.flow_sent(self, seq)
                if self.down:
                    break
        finally:
            self._pumping = False
        return sent

    def _arm_wake(self) -> None:
        t = self.cc.next_send_time(self.sim.now)
        if t is not None:
            self._wake_timer.set(max(t, self.sim.now))

    def _transmit(self, payload: bytes, is_probe: bool) -> int:
        sim = self.sim
        now = sim.now
        seq = self.next_seq
        self.next_seq = seq + 1
        self.in_flight[seq] = [now, payload, is_probe]
        n = len(self.in_flight)
        if n > self.max_in_flight:
            self.max_in_flight = n
        self.cc.on_send(now)
        self.ever_sent = True
        if is_probe:
            self.stats.probes_sent += 1
        else:
            self.stats.data_sent += 1
        if self._rto_timer.deadline is None:
            self._rto_timer.set(now + self.cc.rto)
        self._idle_timer.stop()
        if self.trace_sends is not None:
            self.trace_sends.append((now, seq, payload))
        self.output(HEADER.pack(seq, 0, 0) + payload)
        return seq

    def send_probe(self) -> int | None:
        if self.down:
            return None
        return self._transmit(b"", True)

    # -- receiving -----------------------------------------------------
    def on_packet(self, data: bytes) -> None:
        try:
            h, payload = decode(data)
        except MalformedFlowPacket:
            self.stats.malformed += 1
            return
        self.on_header(h, payload)

    def on_header(self, h: FlowHeader, payload: bytes) -> None:
        if self.down:
            return
        if h.flags & F_ELN:
            self._on_eln_report(h.seq)
            return
        if h.flags & F_PURE:
            self._on_ack(h)
            return
        if h.flags & F_ACK:
            self._on_ack(h)
        self._on_data(h.seq, payload)

    def _on_data(self, seq: int, payload: bytes) -> None:
        st = self.stats
        st.data_received += 1
        fresh = self.receiver.accept(seq)
        self.send_ack()
        if not fresh:
            st.duplicates += 1
            return
        if payload:
            st.delivered += 1
            st.bytes_delivered += len(payload)
            self.user.flow_deliver(self, payload)

    def send_ack(self) -> None:
        self.stats.acks_sent += 1
        r = self.receiver
        self.output(HEADER.pack(0, r.highest, (r.bitmap << 8) | F_ACK | F_PURE))

    def send_eln_report(self, lost_seq: int) -> None:
        self.output(HEADER.pack(lost_seq, 0, F_ELN | F_PURE))

    def _on_ack(self, h: FlowHeader) -> None:
        in_flight = self.in_flight
        if not in_flight:
            return
        now = self.sim.now
        acked = 0
        rtt = size = None
        above = self._acked_above
        for s in h.acked_seqs():
            ent = in_flight.pop(s, None)
            if ent is None:
                continue
            acked += 1
            if rtt is None:
                rtt = now - ent[0]
                size = len(ent[1])
            if s >= self.recovery_point and self.cc.in_fast_recovery:
                self.cc.exit_recovery()
            insort(above, s)
        if not acked:
            return
        self.consecutive_timeouts = 0
        self._set_condition(FlowCondition.UP)
        self.cc.on_ack(acked, rtt, now, size)
        self._detect_gaps()
        if in_flight:
            self._rto_timer.set(now + self.cc.rto)
        else:
            self._rto_timer.stop()
            self._arm_idle()
        self.pump()

    def _detect_gaps(self) -> None:
        in_flight = self.in_flight
        above = self._acked_above
        while in_flight:
            oldest = next(iter(in_flight))
            k = bisect_right(above, oldest)
            if k:
                del above[:k]
            if len(above) < DUP_THRESHOLD:
                break
            self._declare_lost(oldest, LossKind.DUP_ACK_GAP)
        if not in_flight:
            above.clear()

    def _declare_lost(self, seq: int, kind: LossKind) -> None:
        ent = self.in_flight.pop(seq)
        st = self.stats
        if kind is LossKind.DUP_ACK_GAP:
            st.losses_gap += 1
        if seq >= self.recovery_point:
            self.cc.on_loss(kind, self.sim.now)
            self.recovery_point = self.next_seq
        if not ent[2]:
            self.user.flow_loss(self, seq, ent[1], kind)

    def _on_eln_report(self, seq: int) -> None:
        ent = self.in_flight.get(seq)
        if ent is None:
            return
        self.stats.losses_eln += 1
        if self.local_recovery and self.cc.eln_aware:
            del self.in_flight[seq]
            if not ent[2]:
                self.stats.local_retransmits += 1
                self._transmit(ent[1], False)
            return
        if self.cc.eln_aware:
            del self.in_flight[seq]
            if not ent[2]:
                self.user.flow_loss(self, seq, ent[1], LossKind.ELN_NOTIFIED)
            self.pump()
            return
        self._declare_lost(seq, LossKind.DUP_ACK_GAP)
        self.pump()

    # -- timers and condition -----------------------------------------
    def _on_rto(self) -> None:
        if self.down or not self.in_flight:
            return
        self.stats.timeouts += 1
        lost = list(self.in_flight)
        self.cc.on_loss(LossKind.TIMEOUT, self.sim.now)
        if not self.cc.window_based:
            self.cc.backoff_rto()
        self.recovery_point = self.next_seq
        self._acked_above.clear()
        for s in lost:
            ent = self.in_flight.pop(s)
            self.stats.losses_timeout += 1
            if not ent[2]:
                self.user.flow_loss(self, s, ent[1], LossKind.TIMEOUT)
        self.consecutive_timeouts += 1
        if self.consecutive_timeouts >= DOWN_AFTER:
            self._go_down()
            return
        self._set_condition(FlowCondition.UNCERTAIN)
        if self.down:
            return
        self.pump()
        if not self.in_flight and not self.down:
            self.send_probe()

    def _arm_idle(self) -> None:
        if self.keepalive and self.ever_sent and not self.down:
            self._idle_timer.set(self.sim.now + 2 * self.cc.rto)

    def _on_idle(self) -> None:
        if self.down or self.in_flight:
            return
        self.send_probe()

    def _set_condition(self, cond: FlowCondition) -> None:
        if cond is self.condition:
            return
        self.condition = cond
        self.sim.trace("flow_condition", self.name, cond.value)
        self.user.flow_condition(self, cond)

    def _go_down(self) -> None:
        self._rto_timer.kill()
        self._idle_timer.kill()
        self._wake_timer.kill()
        self._set_condition(FlowCondition.DOWN)

    def close(self) -> None:
        """Stop all timers without upcalls (owner is discarding the section)."""
        self._rto_timer.kill()
        self._idle_timer.kill()
        self._wake_timer.kill()
        self.condition = FlowCondition.DOWN

    def state(self) -> dict:
        return {
            "name": self.name,
            "next_seq": self.next_seq,
            "in_flight": len(self.in_flight),
            "condition": self.condition.value,
            "cc": self.cc.state(),
            "recv_highest": self.receiver.highest,
            "recv_bitmap": self.receiver.bitmap,
            "stats": self.stats.as_dict(),
        }
