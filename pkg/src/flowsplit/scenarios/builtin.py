"""Built-in scenarios and the split / end-to-end variants.

Link parameters not fixed by the experiments themselves are calibration
choices: queues are sized in milliseconds of serialization at the link rate
and converted to whole 1500-byte packets.
"""

from __future__ import annotations

import copy

from .config import (
    EventSpec,
    FlowSpec,
    LinkSpec,
    MiddleboxSpec,
    NodeSpec,
    ScenarioConfig,
    SideSpec,
)

PACKET_BITS = 1500 * 8
VARIANTS = ("split", "e2e-newreno", "e2e-vegas")


def queue_for(bandwidth_bps: float, ms: float) -> int:
    return max(1, round(bandwidth_bps * ms / 1000.0 / PACKET_BITS))


def _link(a, b, bw, delay_ms, queue_ms, **kw) -> LinkSpec:
    return LinkSpec(a, b, bw, delay_ms, queue_for(bw, queue_ms), **kw)


# -- Topology 1: residential DSL -------------------------------------------

DSL_UP_BPS = 384_000
DSL_DOWN_BPS = 2_000_000
DSL_DELAY_MS = 10.0
# wide enough that a fair quarter share still exceeds the DSL downlink
CORE_BPS = 20_000_000
CORE_DELAY_MS = 48.0  # client-server idle RTT = 2 * (10 + 1 + 48 + 1) = 120 ms
FAST_BPS = 100_000_000


def dsl(direction: str = "upload", duration_s: float = 1000.0) -> ScenarioConfig:
    """Client behind ADSL, gateway middlebox, shared core link with cross traffic.

    Split variant: Vegas on the ADSL section, NewReno from the gateway on.
    """
    if direction not in ("upload", "download"):
        raise ValueError("direction must be upload or download")
    nodes = [
        NodeSpec("client", "host", controller="vegas"),
        NodeSpec("gw", "middlebox"),
        NodeSpec("r1", "router"),
        NodeSpec("r2", "router"),
        NodeSpec("server", "host", controller="newreno"),
        NodeSpec("xl", "host"),
        NodeSpec("xr", "host"),
    ]
    links = [
        LinkSpec("client", "gw", DSL_UP_BPS, DSL_DELAY_MS,
                 queue_for(DSL_UP_BPS, 1000), bandwidth_ba_bps=DSL_DOWN_BPS,
                 queue_ba=queue_for(DSL_DOWN_BPS, 300)),
        _link("gw", "r1", FAST_BPS, 1.0, 50),
        _link("r1", "r2", CORE_BPS, CORE_DELAY_MS, 100),
        _link("r2", "server", FAST_BPS, 1.0, 50),
        _link("xl", "r1", FAST_BPS, 1.0, 50),
        _link("r2", "xr", FAST_BPS, 1.0, 50),
    ]
    # per-flow queue: 10 packets toward the core, 15 toward the DSL line
    mb = MiddleboxSpec("gw", sides={
        "r1": SideSpec("newreno", queue=10),
        "client": SideSpec("vegas", queue=15),
    })
    if direction == "upload":
        src, dst, xs, xd = "client", "server", "xl", "xr"
    else:
        src, dst, xs, xd = "server", "client", "xr", "xl"
    flows = [FlowSpec("observed", src, dst)]
    flows += [FlowSpec(f"cross{k}", xs, xd, role="cross", start_s=250.0 * k)
              for k in (1, 2, 3)]
    return ScenarioConfig(
        name=f"dsl-{direction}", nodes=nodes, links=links, flows=flows,
        duration_s=duration_s, measurement_interval_s=2.5, middleboxes=[mb],
        description=f"DSL {direction} with NewReno cross traffic joining every 250 s",
    ).validate()


# -- Topology 2: lossy wireless last hop -------------------------------------

WIRELESS_BPS = 5_000_000
WIRELESS_DELAY_MS = 5.0
WAN_BPS = 10_000_000
WAN_DELAY_MS = 50.0
WIRELESS_LOSS = [[0.0, 0.0], [250.0, 0.001], [500.0, 0.01], [750.0, 0.03]]


def wireless(direction: str = "upload", duration_s: float = 1000.0) -> ScenarioConfig:
    """Mobile host on an ELN-capable lossy link; the base station is a middlebox."""
    if direction not in ("upload", "download"):
        raise ValueError("direction must be upload or download")
    nodes = [
        NodeSpec("mobile", "host", controller="simpleeln", local_recovery=True),
        NodeSpec("bs", "middlebox"),
        NodeSpec("server", "host", controller="newreno"),
    ]
    links = [
        _link("mobile", "bs", WIRELESS_BPS, WIRELESS_DELAY_MS, 100,
              loss=copy.deepcopy(WIRELESS_LOSS), eln=True),
        _link("bs", "server", WAN_BPS, WAN_DELAY_MS, 100),
    ]
    mb = MiddleboxSpec("bs", sides={
        "mobile": SideSpec("simpleeln", queue=10, local_recovery=True),
        "server": SideSpec("newreno", queue=10),
    })
    src, dst = ("mobile", "server") if direction == "upload" else ("server", "mobile")
    return ScenarioConfig(
        name=f"wireless-{direction}", nodes=nodes, links=links,
        flows=[FlowSpec("observed", src, dst)], duration_s=duration_s,
        measurement_interval_s=2.5, middleboxes=[mb],
        description="loss on the wireless hop steps 0 -> 0.1% -> 1% -> 3% every 250 s",
    ).validate()


# -- Topology 3: two sites joined by a fixed-rate WAN -------------------------

INTERSITE_WAN_DELAY_MS = 100.0
INTERSITE_LOSS_STEPS = (0.0, 0.001, 0.005, 0.01, 0.02, 0.03)
INTERSITE_EPOCH_S = 10.0
INTERSITE_FIXED_RATE = WAN_BPS / PACKET_BITS  # ~833 packets/s: the WAN line rate


def intersite(duration_s: float | None = None) -> ScenarioConfig:
    duration = duration_s or INTERSITE_EPOCH_S * len(INTERSITE_LOSS_STEPS)
    loss = [[INTERSITE_EPOCH_S * k, p] for k, p in enumerate(INTERSITE_LOSS_STEPS)]
    nodes = [
        NodeSpec("site_a", "host", controller="newreno"),
        NodeSpec("gw_a", "middlebox"),
        NodeSpec("gw_b", "middlebox"),
        NodeSpec("site_b", "host", controller="newreno"),
    ]
    links = [
        _link("site_a", "gw_a", FAST_BPS, 1.0, 50),
        LinkSpec("gw_a", "gw_b", WAN_BPS, INTERSITE_WAN_DELAY_MS, 100, loss=loss),
        _link("gw_b", "site_b", FAST_BPS, 1.0, 50),
    ]
    wan = SideSpec("fixedrate", queue=50, fixed_rate=INTERSITE_FIXED_RATE)
    mbs = [
        MiddleboxSpec("gw_a", sides={"gw_b": wan, "site_a": SideSpec("newreno", queue=50)}),
        MiddleboxSpec("gw_b", sides={"gw_a": copy.deepcopy(wan),
                                      "site_b": SideSpec("newreno", queue=50)}),
    ]
    return ScenarioConfig(
        name="intersite", nodes=nodes, links=links,
        flows=[FlowSpec("observed", "site_a", "site_b")], duration_s=duration,
        measurement_interval_s=1.0, middleboxes=mbs,
        description="WAN loss rises every 10 s; the split path runs the WAN at a fixed rate",
    ).validate()


# -- Migration and fate sharing ------------------------------------------------

MIGRATION_BYTES = 16 * 1024 * 1024


def migration(duration_s: float = 40.0) -> ScenarioConfig:
    nodes = [NodeSpec("a", "host"), NodeSpec("r", "router"), NodeSpec("b", "host"),
             NodeSpec("registry", "host")]
    links = [
        _link("a", "r", WAN_BPS, 5.0, 100),
        _link("r", "b", WAN_BPS, 5.0, 100),
        _link("registry", "r", FAST_BPS, 1.0, 50),
    ]
    return ScenarioConfig(
        name="migration", nodes=nodes, links=links,
        flows=[FlowSpec("observed", "a", "b", size_bytes=MIGRATION_BYTES)],
        duration_s=duration_s, measurement_interval_s=0.5, registry="registry",
        events=[EventSpec(10.0, "readdress", "a")],
        description="the sender gets a new address 10 s into a 16 MiB transfer",
    ).validate()


CRASH_BYTES = 4 * 1024 * 1024


def middlebox_crash(duration_s: float = 60.0, crash_s: float = 5.0,
                    downtime_s: float = 6.0) -> ScenarioConfig:
    nodes = [NodeSpec("client", "host"), NodeSpec("sw", "router"), NodeSpec("mb", "middlebox"),
             NodeSpec("server", "host"), NodeSpec("registry", "host")]
    links = [
        _link("client", "sw", FAST_BPS, 1.0, 50),
        _link("sw", "mb", WAN_BPS, 5.0, 100),
        _link("mb", "server", 2_000_000, 10.0, 100),
        _link("registry", "sw", FAST_BPS, 1.0, 50),
    ]
    mb = MiddleboxSpec("mb", sides={"server": SideSpec("newreno", queue=10),
                                    "sw": SideSpec("newreno", queue=10)})
    return ScenarioConfig(
        name="middlebox-crash", nodes=nodes, links=links,
        flows=[FlowSpec("observed", "client", "server", size_bytes=CRASH_BYTES)],
        duration_s=duration_s, measurement_interval_s=0.5, middleboxes=[mb],
        registry="registry",
        events=[EventSpec(crash_s, "crash", "mb"), EventSpec(crash_s + downtime_s, "restart", "mb")],
        description="the middlebox loses all state mid-transfer and comes back empty",
    ).validate()


QS_BOTTLENECK_BPS = 2_000_000


def queue_sharing(duration_s: float = 300.0) -> ScenarioConfig:
    """A fast upstream section feeding a middlebox whose downstream link is slower."""
    nodes = [NodeSpec("sender", "host"), NodeSpec("mb", "middlebox"),
             NodeSpec("receiver", "host")]
    links = [
        _link("sender", "mb", WAN_BPS, 5.0, 100),
        _link("mb", "receiver", QS_BOTTLENECK_BPS, 10.0, 100),
    ]
    mb = MiddleboxSpec("mb", sides={"receiver": SideSpec("newreno", queue=10),
                                    "sender": SideSpec("newreno", queue=10)})
    return ScenarioConfig(
        name="queue-sharing", nodes=nodes, links=links,
        flows=[FlowSpec("observed", "sender", "receiver")], duration_s=duration_s,
        measurement_interval_s=1.0, middleboxes=[mb],
        description="backpressure: the upstream section should settle at the downstream rate",
    ).validate()


BUILTIN = {
    "dsl-upload": lambda: dsl("upload"),
    "dsl-download": lambda: dsl("download"),
    "wireless-eln": lambda: wireless("upload"),
    "wireless-eln-upload": lambda: wireless("upload"),
    "wireless-eln-download": lambda: wireless("download"),
    "intersite": intersite,
    "migration": migration,
    "middlebox-crash": middlebox_crash,
    "queue-sharing": queue_sharing,
}


def builtin_scenarios() -> dict[str, ScenarioConfig]:
    return {name: build() for name, build in BUILTIN.items()}


def get_scenario(name: str) -> ScenarioConfig:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(BUILTIN)}") from None


def apply_variant(cfg: ScenarioConfig, variant: str) -> ScenarioConfig:
    """Return a copy of ``cfg`` configured as one of ``VARIANTS``.

    ``split`` keeps the per-section controllers. The end-to-end variants turn
    every middlebox into a plain router and run the named controller on the
    observed flow's hosts; cross traffic is untouched.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    out = copy.deepcopy(cfg)
    out.name = f"{cfg.name}/{variant}"
    if variant == "split":
        return out.validate()
    controller = variant.split("-", 1)[1]
    out.middleboxes = []
    observed = {f.src for f in out.flows if f.role == "observed"}
    observed |= {f.dst for f in out.flows if f.role == "observed"}
    for n in out.nodes:
        if n.kind == "middlebox":
            n.kind = "router"
        if n.name in observed:
            n.controller = controller
            n.local_recovery = False
            n.fixed_rate = None
    return out.validate()
