"""Per-section congestion controllers behind one transmit-allowance contract.

Every controller exposes ``on_ack``, ``on_loss``, ``allowance``, ``on_send`` and
``next_send_time``. Window-based controllers count packets; ``FixedRate`` runs a
token bucket and ignores loss entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .sim.engine import NS_PER_MS, NS_PER_S


class LossKind(Enum):
    DUP_ACK_GAP = "dup_ack_gap"
    TIMEOUT = "timeout"
    ELN_NOTIFIED = "eln_notified"
    QUEUE_OVERFLOW_LOCAL = "queue_overflow_local"


@dataclass
class CcConfig:
    initial_cwnd: float = 2.0
    initial_ssthresh: float = 1e6
    rto_initial: int = 1 * NS_PER_S
    rto_min: int = 200 * NS_PER_MS
    rto_max: int = 60 * NS_PER_S
    vegas_alpha: float = 2.0
    vegas_beta: float = 4.0
    vegas_gamma: float = 1.0
    fixed_rate: float | None = None  # packets per second


class Controller:
    name = "base"
    window_based = True
    eln_aware = False

    def __init__(self, config: CcConfig | None = None):
        c = self.config = config or CcConfig()
        self.cwnd = float(c.initial_cwnd)
        self.ssthresh = float(c.initial_ssthresh)
        self.srtt: float | None = None
        self.rttvar: float | None = None
        self.rto = int(c.rto_initial)
        self.base_rtt: float | None = None
        self._base_size = 0
        self.in_fast_recovery = False

    # RTT estimator (gains 1/8 and 1/4)
    def update_rtt(self, sample: int, size: int | None = None) -> bool:
        """Fold in one sample; return whether it may count toward the base RTT.

        Only samples from the largest packets seen so far set ``base_rtt``, so a
        short handshake packet cannot leave a minimum that full segments never
        reach. Without a size every sample counts.
        """
        if sample < 0:
            return False
        if self.srtt is None:
            self.srtt = float(sample)
            self.rttvar = sample / 2.0
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - sample)
            self.srtt = 0.875 * self.srtt + 0.125 * sample
        c = self.config
        self.rto = int(min(max(self.srtt + 4.0 * self.rttvar, c.rto_min), c.rto_max))
        if size is not None:
            if size < self._base_size:
                return False
            if size > self._base_size:
                self._base_size = size
                self.base_rtt = None
        if self.base_rtt is None or sample < self.base_rtt:
            self.base_rtt = float(sample)
        return True

    def backoff_rto(self) -> None:
        self.rto = min(self.rto * 2, self.config.rto_max)

    def on_ack(self, newly_acked: int, rtt_sample: int | None, now: int = 0,
               size: int | None = None) -> None:
        if rtt_sample is not None:
            self.update_rtt(rtt_sample, size)

    def on_loss(self, kind: LossKind, now: int = 0) -> None:
        pass

    def exit_recovery(self) -> None:
        self.in_fast_recovery = False

    def allowance(self, in_flight: int, now: int = 0) -> int:
        return max(0, int(self.cwnd) - in_flight)

    def on_send(self, now: int = 0) -> None:
        pass

    def next_send_time(self, now: int) -> int | None:
        """When allowance will next become positive without an ack, if ever."""
        return None

    def state(self) -> dict:
        return {
            "name": self.name,
            "cwnd": self.cwnd,
            "ssthresh": self.ssthresh,
            "srtt": self.srtt,
            "rttvar": self.rttvar,
            "rto": self.rto,
            "base_rtt": self.base_rtt,
            "in_fast_recovery": self.in_fast_recovery,
        }


class NewReno(Controller):
    name = "newreno"

    def on_ack(self, newly_acked, rtt_sample, now=0, size=None):
        if rtt_sample is not None:
            self.update_rtt(rtt_sample, size)
        if newly_acked <= 0 or self.in_fast_recovery:
            return
        if self.cwnd < self.ssthresh:
            self.cwnd += newly_acked
        else:
            self.cwnd += newly_acked / self.cwnd

    def _halve(self):
        self.ssthresh = max(self.cwnd / 2.0, 2.0)
        self.cwnd = self.ssthresh
        self.in_fast_recovery = True

    def on_loss(self, kind, now=0):
        if kind is LossKind.TIMEOUT:
            self.ssthresh = max(self.cwnd / 2.0, 2.0)
            self.cwnd = 1.0
            self.in_fast_recovery = False
            self.backoff_rto()
        elif kind is LossKind.ELN_NOTIFIED and self.eln_aware:
            return
        else:
            self._halve()


class SimpleEln(NewReno):
    """NewReno that leaves the window alone for link-reported corruption losses."""

    name = "simpleeln"
    eln_aware = True


class Vegas(NewReno):
    """Delay-based control: once per RTT, compare expected and actual throughput.

    Slow start follows the common Linux structure (per-ack growth until the
    backlog estimate exceeds ``gamma``). Losses halve the window as in NewReno.
    """

    name = "vegas"

    def __init__(self, config=None):
        super().__init__(config)
        self._epoch_start: int | None = None
        self._epoch_min: float | None = None
        self._epoch_len: float = 0.0

    def on_ack(self, newly_acked, rtt_sample, now=0, size=None):
        if rtt_sample is not None:
            full = self.update_rtt(rtt_sample, size)
            if full and (self._epoch_min is None or rtt_sample < self._epoch_min):
                self._epoch_min = float(rtt_sample)
        if newly_acked <= 0:
            return
        if self.in_fast_recovery:
            return
        if self.cwnd < self.ssthresh:
            self.cwnd += newly_acked
        if self._epoch_start is None:
            self._epoch_start = now
            self._epoch_len = float(rtt_sample or 0)
            return
        if now - self._epoch_start >= self._epoch_len and self._epoch_min is not None:
            rtt = self._epoch_min
            self._epoch_len = rtt
            self._epoch_start = now
            self._epoch_min = None
            if self.cwnd < self.ssthresh:
                self._slow_start_check(rtt)
            else:
                self.vegas_update(rtt)

    def _slow_start_check(self, rtt: float) -> None:
        if self.base_rtt is None or rtt <= 0:
            return
        target = self.cwnd * self.base_rtt / rtt
        if self.cwnd - target > self.config.vegas_gamma:
            self.cwnd = max(2.0, min(self.cwnd, target + 1.0))
            self.ssthresh = max(2.0, self.cwnd - 1.0)

    def vegas_update(self, rtt_last_epoch: float) -> None:
        if self.base_rtt is None:
            self.base_rtt = float(rtt_last_epoch)
        # cwnd * (1 - base/rtt), arranged so that exact inputs give exact diffs
        diff = self.cwnd * (rtt_last_epoch - self.base_rtt) / rtt_last_epoch
        if diff < self.config.vegas_alpha:
            self.cwnd += 1.0
        elif diff > self.config.vegas_beta:
            self.cwnd -= 1.0
        self.cwnd = max(self.cwnd, 2.0)

    def on_loss(self, kind, now=0):
        super().on_loss(kind, now)
        self._epoch_start = None
        self._epoch_min = None

    def state(self):
        d = super().state()
        d.update(alpha=self.config.vegas_alpha, beta=self.config.vegas_beta)
        return d


class FixedRate(Controller):
    """Administratively fixed packet rate; a one-packet-deep token bucket."""

    name = "fixedrate"
    window_based = False

    def __init__(self, config=None):
        super().__init__(config)
        rate = self.config.fixed_rate
        if rate is None or rate <= 0:
            raise ValueError("fixedrate controller needs a positive fixed_rate")
        self.fixed_rate = float(rate)
        self.tokens = 1.0
        self._last = 0
        self.cwnd = 1.0

    def set_rate(self, rate: float, now: int = 0) -> None:
        self._refill(now)
        self.fixed_rate = float(rate)

    def _refill(self, now: int) -> None:
        if now > self._last:
            self.tokens = min(1.0, self.tokens + self.fixed_rate * (now - self._last) / NS_PER_S)
            self._last = now

    def on_ack(self, newly_acked, rtt_sample, now=0, size=None):
        if rtt_sample is not None:
            self.update_rtt(rtt_sample, size)

    def on_loss(self, kind, now=0):
        pass

    def allowance(self, in_flight, now=0):
        self._refill(now)
        return 1 if self.tokens >= 1.0 - 1e-9 else 0

    def on_send(self, now=0):
        self._refill(now)
        self.tokens -= 1.0

    def next_send_time(self, now):
        self._refill(now)
        need = 1.0 - self.tokens
        if need <= 1e-9:
            return now
        return now + int(math.ceil(need * NS_PER_S / self.fixed_rate))

    def state(self):
        d = super().state()
        d.update(fixed_rate=self.fixed_rate, tokens=self.tokens)
        return d


CONTROLLERS = {
    "newreno": NewReno,
    "vegas": Vegas,
    "fixedrate": FixedRate,
    "simpleeln": SimpleEln,
}


def make_controller(name: str, config: CcConfig | None = None, **overrides) -> Controller:
    try:
        cls = CONTROLLERS[name]
    except KeyError:
        raise ValueError(f"unknown controller {name!r}; choose from {sorted(CONTROLLERS)}") from None
    if overrides:
        base = config or CcConfig()
        config = CcConfig(**{**base.__dict__, **overrides})
    return cls(config)


def fixed_window_share(total_rate: float, active_flows: int) -> float:
    if active_flows < 1:
        raise ValueError("need at least one active flow")
    return total_rate / active_flows
