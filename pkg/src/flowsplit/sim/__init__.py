from .engine import NS_PER_MS, NS_PER_S, SchedulingError, Simulator, Timer, millis, seconds
from .link import (
    DELIVERED,
    DROPPED_BY_LOSS,
    DROPPED_QUEUE_FULL,
    Link,
    LossModel,
    LossNotification,
)
from .network import Datagram, Network, Node, SimulationReport, format_addr

__all__ = [
    "NS_PER_MS", "NS_PER_S", "SchedulingError", "Simulator", "Timer", "millis", "seconds",
    "DELIVERED", "DROPPED_BY_LOSS", "DROPPED_QUEUE_FULL", "Link", "LossModel",
    "LossNotification", "Datagram", "Network", "Node", "SimulationReport", "format_addr",
]
