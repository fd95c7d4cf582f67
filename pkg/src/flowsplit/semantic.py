"""Semantic layer: reliable, ordered byte streams over an isolation channel.

All end-to-end hard state lives here: the send buffer, SACK bookkeeping,
retransmission timers, reassembly and receive-window control. The layer has
no rate control of its own. It emits exactly one frame per transmit grant that
reaches it from the flow section below.

Frame header (8 bytes): ``flags u8 | stream_id u16 | window_exp u8 | offset u32``.
An ACK frame reuses the header with ``offset`` = cumulative ack and carries
``count u8`` followed by ``count`` pairs of ``(start u32, end u32)``.

Each stream's FIN occupies one virtual byte just past the data, so the peer's
cumulative ack tells the sender that the FIN arrived.
"""

from __future__ import annotations

import struct
from bisect import bisect_left, insort
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

from .rangeset import RangeSet
from .sim.engine import NS_PER_MS, NS_PER_S, Simulator, Timer

FRAME = struct.Struct(">BHBI")
FRAME_SIZE = 8
SACK_RANGE = struct.Struct(">II")
MAX_SACK_RANGES = 32

FIN = 0x01
ACK = 0x02
OPEN = 0x04
RESET = 0x08

ZERO_WINDOW = 0xFF
MSS = 1500 - 8 - 12 - 24 - 8  # 1448
RTO_MIN = 200 * NS_PER_MS
RTO_INITIAL = 1 * NS_PER_S
RTO_MAX = 60 * NS_PER_S
PERSIST_INTERVAL = 1 * NS_PER_S
DUP_BYTES = 3 * MSS


class StreamClosed(RuntimeError):
    pass


class AttachRefused(RuntimeError):
    pass


class MalformedFrame(ValueError):
    pass


def window_exp(window: int) -> int:
    """Largest ``e`` with ``2**e <= window``; ``ZERO_WINDOW`` for an empty window."""
    if window <= 0:
        return ZERO_WINDOW
    return min(window.bit_length() - 1, 31)


def window_bytes(exp: int) -> int:
    return 0 if exp == ZERO_WINDOW else 1 << exp


@dataclass
class DataFrame:
    stream_id: int
    offset: int
    payload: bytes = b""
    fin: bool = False
    open: bool = False
    reset: bool = False
    window_exp: int = ZERO_WINDOW


@dataclass
class AckFrame:
    stream_id: int
    cumulative: int
    sack: list[tuple[int, int]]
    window_exp: int = ZERO_WINDOW


def encode_data(f: DataFrame) -> bytes:
    flags = (FIN if f.fin else 0) | (OPEN if f.open else 0) | (RESET if f.reset else 0)
    return FRAME.pack(flags, f.stream_id, f.window_exp, f.offset) + f.payload


def encode_ack(f: AckFrame) -> bytes:
    if len(f.sack) > MAX_SACK_RANGES:
        raise ValueError("too many SACK ranges")
    body = bytes([len(f.sack)]) + b"".join(SACK_RANGE.pack(s, e) for s, e in f.sack)
    return FRAME.pack(ACK, f.stream_id, f.window_exp, f.cumulative) + body


def decode_frame(data: bytes) -> DataFrame | AckFrame:
    if len(data) < FRAME_SIZE:
        raise MalformedFrame("frame shorter than its header")
    flags, sid, wexp, offset = FRAME.unpack_from(data)
    if wexp != ZERO_WINDOW and wexp > 31:
        raise MalformedFrame(f"window exponent {wexp} out of range")
    if flags & ACK:
        if flags & ~ACK:
            raise MalformedFrame("ACK frame with other flags")
        if len(data) < FRAME_SIZE + 1:
            raise MalformedFrame("ACK frame missing range count")
        n = data[FRAME_SIZE]
        if n > MAX_SACK_RANGES or len(data) != FRAME_SIZE + 1 + 8 * n:
            raise MalformedFrame("ACK frame length does not match range count")
        ranges = []
        prev = offset
        for k in range(n):
            s, e = SACK_RANGE.unpack_from(data, FRAME_SIZE + 1 + 8 * k)
            if not prev < s < e:
                raise MalformedFrame("SACK ranges must be non-empty, sorted, disjoint, above cumulative")
            ranges.append((s, e))
            prev = e
        return AckFrame(sid, offset, ranges, wexp)
    if flags & ~(FIN | OPEN | RESET):
        raise MalformedFrame(f"unknown frame flags {flags:#x}")
    return DataFrame(sid, offset, data[FRAME_SIZE:], bool(flags & FIN), bool(flags & OPEN),
                     bool(flags & RESET), wexp)


class RttEstimator:
    __slots__ = ("srtt", "rttvar", "base_rto", "backoff")

    def __init__(self):
        self.srtt: float | None = None
        self.rttvar: float | None = None
        self.base_rto = RTO_INITIAL
        self.backoff = 1

    @property
    def rto(self) -> int:
        return min(self.base_rto * self.backoff, RTO_MAX)

    def sample(self, r: int) -> None:
        if self.srtt is None:
            self.srtt = float(r)
            self.rttvar = r / 2.0
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - r)
            self.srtt = 0.875 * self.srtt + 0.125 * r
        # the variance term never drops below RTO_MIN, so an ack path whose
        # delay grows smoothly (a filling queue) does not fire spurious timeouts
        self.base_rto = int(min(self.srtt + max(4 * self.rttvar, RTO_MIN), RTO_MAX))
        self.backoff = 1

    def back_off(self) -> None:
        if self.rto < RTO_MAX:
            self.backoff *= 2


class Segment:
    __slots__ = ("start", "end", "data_end", "fin", "tx_order", "sent_at", "tx_count",
                 "eligible")

    def __init__(self, start: int, data_end: int, fin: bool):
        self.start = start
        self.data_end = data_end
        self.end = data_end + (1 if fin else 0)
        self.fin = fin
        self.tx_order = 0
        self.sent_at = 0
        self.tx_count = 0
        self.eligible = False

    @property
    def size(self) -> int:
        return self.end - self.start


Source = Callable[["Stream", int], bytes | None]


class Stream:
    """One reliable byte stream. Both directions share the stream id."""

    def __init__(self, session: "Session", stream_id: int, send_buffer: int = 1 << 20,
                 recv_buffer: int = 1 << 20, opened_locally: bool = True):
        self.session = session
        self.sim: Simulator = session.sim
        self.id = stream_id
        self.send_cap = send_buffer
        self.recv_cap = recv_buffer
        self.opened_locally = opened_locally
        # sender
        self._sendbuf = bytearray()
        self._buf_base = 0
        self.write_end = 0
        self.send_next = 0
        self.fin_requested = False
        self.fin_sent = False
        self.fin_offset: int | None = None
        self.acked = RangeSet()
        self.cum_acked = 0
        self.segments: dict[int, Segment] = {}
        self._seg_starts: list[int] = []
        self._outstanding: OrderedDict[int, Segment] = OrderedDict()
        self._eligible: list[int] = []
        self._top_acked: list[tuple[int, int]] = []
        self._tx_order = 0
        self.rtt = RttEstimator()
        self._rto_timer = Timer(self.sim, self._on_rto)
        self.peer_window = recv_buffer
        self._persist_timer = Timer(self.sim, self._on_persist)
        self._probe_due = False
        self.need_open = opened_locally
        self.source: Source | None = None
        self.on_all_acked: Callable[["Stream"], None] | None = None
        # receiver
        self.received = RangeSet()
        self._chunks: dict[int, bytes] = {}
        self.deliver_next = 0
        self._readbuf = bytearray()
        self.read_offset = 0
        self.peer_fin: int | None = None
        self.eof = False
        self.ack_pending = False
        self._adv_exp = ZERO_WINDOW
        self.on_readable: Callable[["Stream"], None] | None = None
        # counters
        self.frames_sent = 0
        self.retransmissions = 0
        self.rto_expiries = 0
        self.threshold_retx = 0
        self.dup_frames = 0
        self.bytes_delivered = 0
        self.max_outstanding = 0
        self.reset_by_peer = False

    # -- application side ---------------------------------------------
    @property
    def writable(self) -> int:
        return max(0, self.send_cap - (self.write_end - self.cum_acked))

    def write(self, data: bytes) -> int:
        if self.fin_requested:
            raise StreamClosed(f"stream {self.id} already closed for writing")
        n = min(len(data), self.writable)
        if n <= 0:
            return 0
        self._sendbuf += data[:n]
        self.write_end += n
        self.session.request_pump()
        return n

    def close(self) -> None:
        if not self.fin_requested:
            self.fin_requested = True
            self.session.request_pump()

    def read(self, max_bytes: int | None = None) -> bytes:
        buf = self._readbuf
        n = len(buf) if max_bytes is None else min(max_bytes, len(buf))
        out = bytes(buf[:n])
        del buf[:n]
        self.read_offset += n
        if n:
            # a reader that reopens a small advertised window tells the peer at
            # once instead of leaving it to the persist timer
            adv = self._adv_exp
            if (window_bytes(adv) < self.recv_cap // 2
                    and window_exp(self.recv_cap - len(buf)) != adv):
                self.ack_pending = True
                self.session.request_pump()
        return out

    @property
    def all_acked(self) -> bool:
        end = self.write_end + (1 if self.fin_requested else 0)
        return self.cum_acked >= end and (self.fin_sent or not self.fin_requested)

    @property
    def unacked_bytes(self) -> int:
        return self.send_next - self.cum_acked

    # -- sender: what to transmit -------------------------------------
    def _fill_from_source(self) -> None:
        if self.source is None or self.fin_requested or self.send_next < self.write_end:
            return
        data = self.source(self, MSS)
        if data is None:
            return
        if data:
            self.write(data)
        else:
            self.close()

    def has_new_data(self) -> bool:
        if self.send_next >= self.write_end:
            self._fill_from_source()
        if self.send_next < self.write_end:
            return True
        return self.fin_requested and not self.fin_sent

    def window_allows(self) -> bool:
        n = min(MSS, self.write_end - self.send_next)
        return self.send_next + max(n, 1) - self.cum_acked <= self.peer_window

    def wants_to_send(self) -> bool:
        if self.ack_pending or self._eligible or self._probe_due:
            return True
        if not self.has_new_data():
            return False
        if self.window_allows():
            return True
        self._arm_persist()
        return False

    def next_frame(self) -> bytes | None:
        """Build the next frame: ACK, then retransmission, then new data."""
        if self.ack_pending:
            return self._ack_frame()
        while self._eligible:
            start = self._eligible.pop(0)
            seg = self.segments.get(start)
            if seg is not None and seg.eligible:
                self.retransmissions += 1
                return self._emit(seg)
        if self.has_new_data() and self.window_allows():
            n = min(MSS, self.write_end - self.send_next)
            start = self.send_next
            data_end = start + n
            fin = self.fin_requested and data_end == self.write_end
            seg = Segment(start, data_end, fin)
            self.segments[start] = seg
            self._seg_starts.append(start)
            self.send_next = seg.end
            if fin:
                self.fin_sent = True
                self.fin_offset = data_end
            out = self.send_next - self.cum_acked
            if out > self.max_outstanding:
                self.max_outstanding = out
            return self._emit(seg)
        if self._probe_due:
            self._probe_due = False
            return encode_data(DataFrame(self.id, self.send_next, b"",
                                         window_exp=self._my_window_exp()))
        return None

    def _emit(self, seg: Segment) -> bytes:
        now = self.sim.now
        self._tx_order += 1
        seg.tx_order = self._tx_order
        seg.sent_at = now
        seg.tx_count += 1
        seg.eligible = False
        self._outstanding[seg.tx_order] = seg
        if self._rto_timer.deadline is None:
            self._rto_timer.set(now + self.rtt.rto)
        lo = seg.start - self._buf_base
        payload = bytes(self._sendbuf[lo:lo + (seg.data_end - seg.start)])
        opened = self.need_open
        self.frames_sent += 1
        return encode_data(DataFrame(self.id, seg.start, payload, seg.fin, opened,
                                     window_exp=self._my_window_exp()))

    # -- sender: acknowledgments --------------------------------------
    def on_ack(self, f: AckFrame) -> None:
        now = self.sim.now
        self.need_open = False
        prev_window = self.peer_window
        self.peer_window = window_bytes(f.window_exp)
        newly: list[Segment] = []
        if f.cumulative > self.cum_acked:
            self.acked.add(0, f.cumulative)
            self._collect(self.cum_acked, f.cumulative, newly)
        for s, e in f.sack:
            if not self.acked.covers(s, e):
                self.acked.add(s, e)
                self._collect(s, e, newly)
        self.cum_acked = self.acked.first_gap_from(0) if self.acked else 0
        sample = None
        for seg in newly:
            self._outstanding.pop(seg.tx_order, None)
            if seg.tx_count == 1:
                # an ack for a resent segment may be for any of its copies, so
                # it feeds neither the RTT nor the threshold rule
                sample = now - seg.sent_at
                self._note_acked(seg.tx_order, seg.size)
        if sample is not None:
            self.rtt.sample(sample)
        self._trim_sendbuf()
        self._apply_threshold()
        if self._outstanding:
            oldest = next(iter(self._outstanding.values()))
            if newly:
                self._rto_timer.set(max(now, oldest.sent_at + self.rtt.rto))
        else:
            self._rto_timer.stop()
        if self.peer_window > 0 and (self.send_next > self.cum_acked or self.window_allows()):
            self._persist_timer.stop()
            self._probe_due = False
        if newly or self.peer_window > prev_window or self._eligible:
            self.session.request_pump()
        if self.on_all_acked is not None and self.all_acked:
            cb, self.on_all_acked = self.on_all_acked, None
            cb(self)

    def _collect(self, s: int, e: int, out: list) -> None:
        starts = self._seg_starts
        i = bisect_left(starts, s)
        j = i
        segs = self.segments
        acked = self.acked
        while j < len(starts) and starts[j] < e:
            seg = segs[starts[j]]
            if acked.covers(seg.start, seg.end):
                del segs[seg.start]
                del starts[j]
                out.append(seg)
            else:
                j += 1

    def _note_acked(self, tx_order: int, size: int) -> None:
        top = self._top_acked
        insort(top, (tx_order, size))
        total = sum(b for _, b in top)
        while len(top) > 1 and total - top[0][1] >= DUP_BYTES:
            total -= top[0][1]
            top.pop(0)

    def _acked_after(self, tx_order: int) -> int:
        return sum(b for t, b in self._top_acked if t > tx_order)

    def _apply_threshold(self) -> None:
        out = self._outstanding
        while out:
            seg = next(iter(out.values()))
            if self._acked_after(seg.tx_order) < DUP_BYTES:
                break
            self.threshold_retx += 1
            self._make_eligible(seg)

    def _make_eligible(self, seg: Segment) -> None:
        self._outstanding.pop(seg.tx_order, None)
        seg.eligible = True
        insort(self._eligible, seg.start)

    def _trim_sendbuf(self) -> None:
        cut = min(self.cum_acked, self.write_end) - self._buf_base
        if cut >= 1 << 18 or (cut > 0 and cut == len(self._sendbuf)):
            del self._sendbuf[:cut]
            self._buf_base += cut

    def _on_rto(self) -> None:
        now = self.sim.now
        rto = self.rtt.rto
        fired = False
        for seg in list(self._outstanding.values()):
            if seg.sent_at + rto > now:
                break
            self._make_eligible(seg)
            fired = True
        if fired:
            self.rto_expiries += 1
            self.rtt.back_off()
            self.session.request_pump()
        if self._outstanding:
            oldest = next(iter(self._outstanding.values()))
            self._rto_timer.set(max(now + 1, oldest.sent_at + self.rtt.rto))

    def _window_stalled(self) -> bool:
        # nothing in flight to draw an ack, yet the next segment does not fit
        return self.send_next == self.cum_acked and not self.window_allows()

    def _arm_persist(self) -> None:
        if self._window_stalled() and self._persist_timer.deadline is None and not self._probe_due:
            self._persist_timer.start(PERSIST_INTERVAL)

    def _on_persist(self) -> None:
        if self._window_stalled() and self.has_new_data():
            self._probe_due = True
            self.session.request_pump()

    def mark_all_eligible(self) -> int:
        n = 0
        for seg in list(self._outstanding.values()):
            self._make_eligible(seg)
            n += 1
        return n

    # -- receiver ------------------------------------------------------
    def _my_window_exp(self) -> int:
        e = window_exp(self.recv_cap - len(self._readbuf))
        self._adv_exp = e
        return e

    def on_data(self, f: DataFrame) -> None:
        if f.reset:
            self.reset_by_peer = True
            self.eof = True
            return
        n = len(f.payload)
        end = f.offset + n + (1 if f.fin else 0)
        self.ack_pending = True
        if end == f.offset:
            self.session.request_pump()
            return
        if f.fin:
            self.peer_fin = f.offset + n
        if end > self.deliver_next + self.recv_cap:
            self.session.request_pump()
            return
        if self.received.covers(f.offset, end):
            self.dup_frames += 1
            self.session.request_pump()
            return
        self.received.add(f.offset, end)
        if n and f.offset >= self.deliver_next:
            self._chunks[f.offset] = f.payload
        self._reassemble()
        self.session.request_pump()

    def _reassemble(self) -> None:
        delivered = False
        chunks = self._chunks
        while True:
            c = chunks.pop(self.deliver_next, None)
            if c is None:
                break
            self._readbuf += c
            self.deliver_next += len(c)
            self.bytes_delivered += len(c)
            delivered = True
        if self.peer_fin is not None and self.deliver_next == self.peer_fin and not self.eof:
            self.eof = True
            delivered = True
        if delivered and self.on_readable is not None:
            self.on_readable(self)

    def _ack_frame(self) -> bytes:
        self.ack_pending = False
        cum = self.received.first_gap_from(0) if self.received else 0
        ranges = self.received.above(cum)
        if len(ranges) > MAX_SACK_RANGES:
            ranges = ranges[-MAX_SACK_RANGES:]
        return encode_ack(AckFrame(self.id, cum, ranges, self._my_window_exp()))

    def shutdown(self) -> None:
        self._rto_timer.kill()
        self._persist_timer.kill()

    def state(self) -> dict:
        return {
            "id": self.id, "write_end": self.write_end, "send_next": self.send_next,
            "cum_acked": self.cum_acked, "deliver_next": self.deliver_next,
            "outstanding": len(self._outstanding), "eligible": len(self._eligible),
            "retransmissions": self.retransmissions, "eof": self.eof,
        }


class Session:
    """A semantic connection: a set of streams bound to one channel at a time."""

    def __init__(self, sim: Simulator, remote_id: bytes, initiator: bool, name: str = ""):
        self.sim = sim
        self.remote_id = remote_id
        self.initiator = initiator
        self.name = name
        self.channel = None
        self.streams: dict[int, Stream] = {}
        self._rr: list[int] = []
        self.grants = 0
        self.frames = 0
        self.malformed = 0
        self.migrations = 0
        self.on_stream: Callable[[Stream], None] | None = None
        self.on_failed: Callable[["Session", object], None] | None = None
        self.on_condition: Callable[["Session", object], None] | None = None
        self._next_stream = 1 if initiator else 2
        self.rebuild_attempt = 0
        self.on_ready: Callable[["Session"], None] | None = None
        self.history: list[tuple[int, str]] = []

    # -- streams ---------------------------------------------------------
    def open_stream(self, **kw) -> Stream:
        sid = self._next_stream
        self._next_stream += 2
        s = Stream(self, sid, **kw)
        self._add(s)
        return s

    def _add(self, s: Stream) -> None:
        self.streams[s.id] = s
        self._rr.append(s.id)

    # -- channel binding ------------------------------------------------
    def attach(self, channel) -> None:
        if channel.remote is None or channel.remote.id != self.remote_id:
            raise AttachRefused("channel peer identity differs from the session's")
        first = self.channel is None
        self.channel = channel
        channel.user = self
        if not first:
            self.migrations += 1
            for s in self.streams.values():
                s.mark_all_eligible()
                s.need_open = s.opened_locally and s.cum_acked == 0
        self.history.append((self.sim.now, "attach"))
        self.request_pump()

    migrate_streams = attach

    def request_pump(self) -> None:
        ch = self.channel
        if ch is not None:
            ch.pump()

    # -- ChannelUser -----------------------------------------------------
    def channel_pending(self, ch) -> bool:
        if ch is not self.channel:
            return False
        return any(s.wants_to_send() for s in self.streams.values())

    def channel_pull(self, ch) -> bytes | None:
        if ch is not self.channel:
            return None
        self.grants += 1
        rr = self._rr
        for k in range(len(rr)):
            sid = rr[k]
            s = self.streams[sid]
            if s.ack_pending:
                self.frames += 1
                return s.next_frame()
        for k in range(len(rr)):
            sid = rr[0]
            rr.append(rr.pop(0))
            frame = self.streams[sid].next_frame()
            if frame is not None:
                self.frames += 1
                return frame
        return None

    def channel_deliver(self, ch, frame: bytes) -> None:
        try:
            f = decode_frame(frame)
        except MalformedFrame:
            self.malformed += 1
            return
        s = self.streams.get(f.stream_id)
        if s is None:
            if isinstance(f, DataFrame) and f.open:
                s = Stream(self, f.stream_id, opened_locally=False)
                self._add(s)
                if self.on_stream is not None:
                    self.on_stream(s)
            else:
                return
        if isinstance(f, AckFrame):
            s.on_ack(f)
        else:
            s.on_data(f)

    def channel_condition(self, ch, cond) -> None:
        if ch is not self.channel:
            return
        self.history.append((self.sim.now, cond.value))
        if self.on_condition is not None:
            self.on_condition(self, cond)
        if cond.value == "failed" and self.on_failed is not None:
            self.on_failed(self, ch)

    def channel_established(self, ch) -> None:
        pass

    def channel_negotiation_failed(self, ch, err) -> None:
        pass

    def shutdown(self) -> None:
        for s in self.streams.values():
            s.shutdown()
