"""Deterministic discrete-event engine.

Time is integer nanoseconds. Events are ordered by ``(time, insertion_seq)`` so
that two events scheduled for the same instant fire in the order they were
scheduled.
"""

from __future__ import annotations

import hashlib
import heapq
import random

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000


def seconds(x: float) -> int:
    return int(round(x * NS_PER_S))


def millis(x: float) -> int:
    return int(round(x * NS_PER_MS))


class SchedulingError(ValueError):
    """Raised when an event is scheduled before the current time."""


class Event:
    __slots__ = ("time", "seq", "fn", "args", "cancelled")

    def __init__(self, time, seq, fn, args):
        self.time = time
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


def derive_seed(master_seed: int, *key) -> int:
    """Derive a 64-bit stream seed from the master seed and a stable key."""
    h = hashlib.sha256(repr((int(master_seed),) + tuple(key)).encode())
    return int.from_bytes(h.digest()[:8], "big")


class Simulator:
    """Single-timeline event loop.

    Random streams come from :meth:`rng`, each a ``random.Random`` (Mersenne
    Twister) seeded by ``derive_seed(seed, *key)``, so adding a consumer never
    perturbs another consumer's sequence.
    """

    def __init__(self, seed: int = 0, log_events: bool = False):
        self.now = 0
        self.seed = seed
        self._heap: list = []
        self._seq = 0
        self.dispatched = 0
        self.log: list[str] | None = [] if log_events else None

    def schedule(self, at: int, fn, *args) -> Event:
        if at < self.now:
            raise SchedulingError(f"cannot schedule at {at} ns, clock is {self.now} ns")
        self._seq += 1
        ev = Event(at, self._seq, fn, args)
        heapq.heappush(self._heap, (at, self._seq, ev))
        return ev

    def after(self, delay: int, fn, *args) -> Event:
        return self.schedule(self.now + delay, fn, *args)

    @staticmethod
    def cancel(ev: Event | None) -> None:
        if ev is not None:
            ev.cancelled = True

    def rng(self, *key) -> random.Random:
        return random.Random(derive_seed(self.seed, *key))

    def trace(self, kind: str, where: str, detail: str = "") -> None:
        if self.log is not None:
            self.log.append(f"{self.now}\t{kind}\t{where}\t{detail}")

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)

    def run_until(self, t_end: int) -> int:
        """Dispatch every event with time <= t_end and leave the clock at t_end."""
        if t_end < self.now:
            raise SchedulingError(f"t_end {t_end} is before the clock {self.now}")
        heap = self._heap
        pop = heapq.heappop
        n = 0
        while heap and heap[0][0] <= t_end:
            t, _, ev = pop(heap)
            if ev.cancelled:
                continue
            self.now = t
            n += 1
            ev.fn(*ev.args)
        self.now = t_end
        self.dispatched += n
        return n

    def run(self) -> int:
        """Run until the event queue drains."""
        n = 0
        heap = self._heap
        while heap:
            t, _, ev = heapq.heappop(heap)
            if ev.cancelled:
                continue
            self.now = t
            n += 1
            ev.fn(*ev.args)
        self.dispatched += n
        return n

    def export_log(self) -> str:
        return "\n".join(self.log or ()) + ("\n" if self.log else "")


class Timer:
    """Restartable one-shot timer.

    Moving the deadline later does not touch the heap; the already-scheduled
    wakeup notices the new deadline and re-arms itself. Protocol timers that
    restart on every ack would otherwise flood the queue with cancelled events.
    """

    __slots__ = ("sim", "fn", "deadline", "_ev")

    def __init__(self, sim: Simulator, fn):
        self.sim = sim
        self.fn = fn
        self.deadline: int | None = None
        self._ev: Event | None = None

    @property
    def armed(self) -> bool:
        return self.deadline is not None

    def set(self, at: int) -> None:
        self.deadline = at
        ev = self._ev
        if ev is None or ev.cancelled:
            self._ev = self.sim.schedule(at, self._fire)
        elif ev.time > at:
            ev.cancelled = True
            self._ev = self.sim.schedule(at, self._fire)

    def start(self, delay: int) -> None:
        self.set(self.sim.now + delay)

    def stop(self) -> None:
        self.deadline = None

    def kill(self) -> None:
        self.deadline = None
        if self._ev is not None:
            self._ev.cancelled = True
            self._ev = None

    def _fire(self) -> None:
        self._ev = None
        d = self.deadline
        if d is None:
            return
        if d > self.sim.now:
            self._ev = self.sim.schedule(d, self._fire)
            return
        self.deadline = None
        self.fn()
