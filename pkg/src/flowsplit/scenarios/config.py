"""Scenario configuration: dataclasses that round-trip through JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

NODE_KINDS = ("host", "router", "middlebox")
FLOW_ROLES = ("observed", "cross")
EVENT_KINDS = ("readdress", "crash", "restart")
CONTROLLERS = ("newreno", "vegas", "fixedrate", "simpleeln")


class ConfigError(ValueError):
    """A scenario file or dict failed validation; ``path`` names the field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class NodeSpec:
    name: str
    kind: str = "router"
    controller: str = "newreno"
    local_recovery: bool = False
    fixed_rate: float | None = None


@dataclass
class LinkSpec:
    a: str
    b: str
    bandwidth_bps: float
    delay_ms: float
    queue: int
    bandwidth_ba_bps: float | None = None
    queue_ba: int | None = None
    loss: list[list[float]] = field(default_factory=list)  # [[start_s, rate], ...]
    eln: bool = False


@dataclass
class SideSpec:
    controller: str = "newreno"
    queue: int = 10
    fixed_rate: float | None = None
    local_recovery: bool = False


@dataclass
class MiddleboxSpec:
    node: str
    sides: dict[str, SideSpec] = field(default_factory=dict)
    default: SideSpec = field(default_factory=SideSpec)


@dataclass
class FlowSpec:
    id: str
    src: str
    dst: str
    role: str = "observed"
    start_s: float = 0.0
    size_bytes: int | None = None  # None: greedy for the whole run
    controller: str = "newreno"  # cross traffic only; observed flows use host configs


@dataclass
class EventSpec:
    t_s: float
    kind: str
    node: str


@dataclass
class ScenarioConfig:
    name: str
    nodes: list[NodeSpec]
    links: list[LinkSpec]
    flows: list[FlowSpec]
    duration_s: float
    measurement_interval_s: float = 2.5
    middleboxes: list[MiddleboxSpec] = field(default_factory=list)
    events: list[EventSpec] = field(default_factory=list)
    registry: str | None = None
    description: str = ""

    # -- lookups ---------------------------------------------------------
    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def middlebox(self, name: str) -> MiddleboxSpec | None:
        for m in self.middleboxes:
            if m.node == name:
                return m
        return None

    # -- validation --------------------------------------------------------
    def validate(self) -> "ScenarioConfig":
        names = set()
        for i, n in enumerate(self.nodes):
            p = f"nodes[{i}]"
            if not n.name:
                raise ConfigError(f"{p}.name", "must be non-empty")
            if n.name in names:
                raise ConfigError(f"{p}.name", f"duplicate node {n.name!r}")
            names.add(n.name)
            if n.kind not in NODE_KINDS:
                raise ConfigError(f"{p}.kind", f"must be one of {NODE_KINDS}")
            _check_controller(f"{p}.controller", n.controller, n.fixed_rate)
        for i, l in enumerate(self.links):
            p = f"links[{i}]"
            for end in ("a", "b"):
                if getattr(l, end) not in names:
                    raise ConfigError(f"{p}.{end}", f"unknown node {getattr(l, end)!r}")
            if l.bandwidth_bps <= 0 or (l.bandwidth_ba_bps is not None and l.bandwidth_ba_bps <= 0):
                raise ConfigError(f"{p}.bandwidth_bps", "must be positive")
            if l.delay_ms < 0:
                raise ConfigError(f"{p}.delay_ms", "must be non-negative")
            if l.queue < 1 or (l.queue_ba is not None and l.queue_ba < 1):
                raise ConfigError(f"{p}.queue", "must be at least 1 packet")
            prev = None
            for k, entry in enumerate(l.loss):
                if len(entry) != 2:
                    raise ConfigError(f"{p}.loss[{k}]", "must be [start_s, rate]")
                t, r = entry
                if not 0.0 <= r <= 1.0:
                    raise ConfigError(f"{p}.loss[{k}]", f"rate {r} outside [0, 1]")
                if prev is not None and t <= prev:
                    raise ConfigError(f"{p}.loss[{k}]", "start times must strictly increase")
                prev = t
        for i, m in enumerate(self.middleboxes):
            p = f"middleboxes[{i}]"
            if m.node not in names or self.node(m.node).kind != "middlebox":
                raise ConfigError(f"{p}.node", f"{m.node!r} is not a middlebox node")
            for nb, side in m.sides.items():
                if nb not in names:
                    raise ConfigError(f"{p}.sides.{nb}", "unknown neighbor")
                _check_controller(f"{p}.sides.{nb}.controller", side.controller, side.fixed_rate)
                if side.queue < 1:
                    raise ConfigError(f"{p}.sides.{nb}.queue", "must be at least 1")
        ids = set()
        for i, f in enumerate(self.flows):
            p = f"flows[{i}]"
            if f.id in ids:
                raise ConfigError(f"{p}.id", f"duplicate flow id {f.id!r}")
            ids.add(f.id)
            if f.role not in FLOW_ROLES:
                raise ConfigError(f"{p}.role", f"must be one of {FLOW_ROLES}")
            for end in ("src", "dst"):
                nm = getattr(f, end)
                if nm not in names or self.node(nm).kind != "host":
                    raise ConfigError(f"{p}.{end}", f"{nm!r} is not a host")
            if f.start_s < 0:
                raise ConfigError(f"{p}.start_s", "must be non-negative")
            if f.size_bytes is not None and f.size_bytes <= 0:
                raise ConfigError(f"{p}.size_bytes", "must be positive")
            _check_controller(f"{p}.controller", f.controller, None)
        for i, e in enumerate(self.events):
            p = f"events[{i}]"
            if e.kind not in EVENT_KINDS:
                raise ConfigError(f"{p}.kind", f"must be one of {EVENT_KINDS}")
            if e.node not in names:
                raise ConfigError(f"{p}.node", f"unknown node {e.node!r}")
        if self.registry is not None and (self.registry not in names
                                          or self.node(self.registry).kind != "host"):
            raise ConfigError("registry", f"{self.registry!r} is not a host")
        if self.duration_s <= 0:
            raise ConfigError("duration_s", "must be positive")
        if self.measurement_interval_s <= 0:
            raise ConfigError("measurement_interval_s", "must be positive")
        return self

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return _build(cls, d, "").validate()

    @classmethod
    def from_json(cls, text: str, source: str = "<string>") -> "ScenarioConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}:{e.lineno}:{e.colno}", e.msg) from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        p = Path(path)
        return cls.from_json(p.read_text(), str(p))


def _check_controller(path: str, name: str, fixed_rate) -> None:
    if name not in CONTROLLERS:
        raise ConfigError(path, f"unknown controller {name!r}; choose from {CONTROLLERS}")
    if name == "fixedrate" and (fixed_rate is None or fixed_rate <= 0):
        raise ConfigError(path, "fixedrate needs a positive fixed_rate")


_NESTED = {
    ("ScenarioConfig", "nodes"): NodeSpec,
    ("ScenarioConfig", "links"): LinkSpec,
    ("ScenarioConfig", "flows"): FlowSpec,
    ("ScenarioConfig", "middleboxes"): MiddleboxSpec,
    ("ScenarioConfig", "events"): EventSpec,
}


def _build(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"{path}{sorted(extra)[0]}", "unknown field")
    kw = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        sub = _NESTED.get((cls.__name__, f.name))
        if sub is not None:
            if not isinstance(v, list):
                raise ConfigError(f"{path}{f.name}", "expected a list")
            v = [_build(sub, x, f"{path}{f.name}[{i}].") for i, x in enumerate(v)]
        elif cls is MiddleboxSpec and f.name == "sides":
            if not isinstance(v, dict):
                raise ConfigError(f"{path}sides", "expected an object")
            v = {k: _build(SideSpec, x, f"{path}sides.{k}.") for k, x in v.items()}
        elif cls is MiddleboxSpec and f.name == "default":
            v = _build(SideSpec, v, f"{path}default.")
        kw[f.name] = v
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(path.rstrip(".") or "<root>", str(e)) from None
