"""Unidirectional links with a drop-tail packet queue and scheduled Bernoulli loss."""

from __future__ import annotations

from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field

from .engine import NS_PER_S, Simulator

DELIVERED = "delivered"
DROPPED_QUEUE_FULL = "dropped_queue_full"
DROPPED_BY_LOSS = "dropped_by_loss"


class LossModel:
    """Piecewise-constant loss rate: ``schedule`` is ``[(start_ns, rate), ...]``."""

    __slots__ = ("starts", "rates")

    def __init__(self, schedule=((0, 0.0),)):
        starts, rates = [], []
        for t, p in schedule:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"loss rate {p} outside [0, 1]")
            if starts and t <= starts[-1]:
                raise ValueError("loss schedule start times must be strictly increasing")
            starts.append(int(t))
            rates.append(float(p))
        if not starts:
            raise ValueError("empty loss schedule")
        self.starts = starts
        self.rates = rates

    def rate_at(self, t: int) -> float:
        i = bisect_right(self.starts, t) - 1
        return self.rates[i] if i >= 0 else 0.0

    @property
    def lossless(self) -> bool:
        return not any(self.rates)

    def as_list(self):
        return list(zip(self.starts, self.rates))


@dataclass
class LinkStats:
    offered: int = 0
    delivered: int = 0
    dropped_queue: int = 0
    dropped_loss: int = 0
    bytes_delivered: int = 0
    eln_notifications: int = 0
    max_queue: int = 0

    @property
    def in_flight(self) -> int:
        return self.offered - self.delivered - self.dropped_queue - self.dropped_loss


@dataclass
class LossNotification:
    link_id: str
    datagram: object
    time: int


@dataclass
class Link:
    """One direction of a point-to-point link.

    The queue holds packets waiting for the transmitter (the packet being
    serialized is not counted). The loss decision for a packet is drawn when
    its serialization starts, from this link's own random stream.
    """

    sim: Simulator
    link_id: str
    src: object
    dst: object
    bandwidth_bps: int
    prop_delay_ns: int
    queue_capacity: int
    loss_model: LossModel | None = None
    eln_capable: bool = False
    stats: LinkStats = field(default_factory=LinkStats)

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")
        if self.queue_capacity < 0:
            raise ValueError("queue capacity must be non-negative")
        self._waiting: deque[int] = deque()
        self._busy_until = 0
        self._rng = self.sim.rng("link", self.link_id)
        if self.loss_model is not None and self.loss_model.lossless:
            self.loss_model = None
        self.up = True

    def serialization_ns(self, size_bytes: int) -> int:
        return size_bytes * 8 * NS_PER_S // self.bandwidth_bps

    def queue_length(self, now: int | None = None) -> int:
        now = self.sim.now if now is None else now
        w = self._waiting
        while w and w[0] <= now:
            w.popleft()
        return len(w)

    def transmit(self, dgram) -> tuple[str, int | None]:
        """Offer a packet to the link; returns ``(outcome, delivery_time)``."""
        sim = self.sim
        now = sim.now
        size = len(dgram.data)
        if size <= 0:
            raise ValueError("packet size must be positive")
        st = self.stats
        st.offered += 1
        w = self._waiting
        while w and w[0] <= now:
            w.popleft()
        if len(w) >= self.queue_capacity and self._busy_until > now:
            st.dropped_queue += 1
            if sim.log is not None:
                sim.trace("drop_queue", self.link_id, f"{dgram.src}>{dgram.dst} {size}")
            return DROPPED_QUEUE_FULL, None
        start = self._busy_until if self._busy_until > now else now
        end = start + size * 8 * NS_PER_S // self.bandwidth_bps
        self._busy_until = end
        if start > now:
            w.append(start)
            if len(w) > st.max_queue:
                st.max_queue = len(w)
        lm = self.loss_model
        if lm is not None:
            draw = self._rng.random()
            if draw < lm.rate_at(start):
                st.dropped_loss += 1
                if sim.log is not None:
                    sim.trace("drop_loss", self.link_id, f"{dgram.src}>{dgram.dst} {size}")
                if self.eln_capable:
                    st.eln_notifications += 1
                    sim.schedule(end + self.prop_delay_ns, self._notify_loss, dgram)
                return DROPPED_BY_LOSS, None
        at = end + self.prop_delay_ns
        sim.schedule(at, self._deliver, dgram)
        if sim.log is not None:
            sim.trace("enqueue", self.link_id, f"{dgram.src}>{dgram.dst} {size} at={at}")
        return DELIVERED, at

    def _deliver(self, dgram) -> None:
        st = self.stats
        st.delivered += 1
        st.bytes_delivered += len(dgram.data)
        sim = self.sim
        if sim.log is not None:
            sim.trace("deliver", self.link_id, f"{dgram.src}>{dgram.dst} {len(dgram.data)}")
        self.dst.receive(dgram, self)

    def _notify_loss(self, dgram) -> None:
        self.sim.trace("eln", self.link_id, f"{dgram.src}>{dgram.dst}")
        self.dst.on_link_loss(LossNotification(self.link_id, dgram, self.sim.now))

    def report(self) -> dict:
        st = self.stats
        return {
            "offered": st.offered,
            "delivered": st.delivered,
            "dropped_queue": st.dropped_queue,
            "dropped_loss": st.dropped_loss,
            "in_flight": st.in_flight,
            "bytes_delivered": st.bytes_delivered,
            "eln_notifications": st.eln_notifications,
            "max_queue": st.max_queue,
        }
