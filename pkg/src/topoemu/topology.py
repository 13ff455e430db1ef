"""Experiment descriptions: parsing, validation and canonical serialization.

An experiment file is YAML with an ``experiment`` block (``services``,
``bridges``, ``links``), an optional ``dynamic`` list of timed events and an
optional ``workload`` list of offered-load segments::

    experiment:
      services:
        - name: c1
          image: iperf
        - name: sv
          image: nginx
          replicas: 2
      bridges:
        - name: s1
      links:
        - orig: c1
          dest: s1
          latency: 10
          up: 10Mbps
          down: 10Mbps
          jitter: 0.25
    dynamic:
      - orig: c1
        dest: s1
        jitter: 0.5
        time: 120
      - action: leave
        name: s1
        time: 200
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from functools import cached_property
from typing import Any

import yaml

try:
    _Loader = yaml.CSafeLoader
    _Dumper = yaml.CSafeDumper
except AttributeError:  # pragma: no cover - libyaml missing
    _Loader = yaml.SafeLoader
    _Dumper = yaml.SafeDumper

__all__ = [
    "Bridge",
    "DynamicEvent",
    "ExperimentSyntaxError",
    "Link",
    "LinkSpec",
    "NetworkState",
    "ServiceSpec",
    "Topology",
    "TopologyError",
    "Traffic",
    "ValidationError",
    "dump_experiment",
    "format_bandwidth",
    "instance_name",
    "load_experiment",
    "parse_bandwidth",
    "parse_experiment",
    "validate",
]

UNBOUNDED = math.inf

LINK_PROPERTIES = ("latency_ms", "jitter_ms", "loss", "up_bps", "down_bps")


class TopologyError(ValueError):
    """Raised for experiment descriptions that cannot be turned into a topology."""


class ExperimentSyntaxError(TopologyError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)


class ValidationError(TopologyError):
    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    image: str = ""
    replicas: int = 1
    tags: dict[str, str] = field(default_factory=dict)

    @property
    def instances(self) -> tuple[str, ...]:
        return tuple(instance_name(self.name, i) for i in range(self.replicas))


@dataclass(frozen=True)
class Bridge:
    name: str


@dataclass(frozen=True)
class LinkSpec:
    """A link as declared in the file; bidirectional specs carry ``down_bps``."""

    id: int
    orig: str
    dest: str
    latency_ms: float
    up_bps: int
    down_bps: int | None = None
    jitter_ms: float = 0.0
    loss: float = 0.0

    @property
    def bidirectional(self) -> bool:
        return self.down_bps is not None

    @property
    def bandwidth_bps(self) -> int:
        return self.up_bps


@dataclass(frozen=True)
class Link:
    """A directed link of the emulated graph."""

    id: int
    orig: str
    dest: str
    latency_ms: float
    bandwidth_bps: int
    jitter_ms: float = 0.0
    loss: float = 0.0


@dataclass(frozen=True)
class DynamicEvent:
    time_s: float
    kind: str  # "link-change" | "join" | "leave"
    name: str | None = None
    orig: str | None = None
    dest: str | None = None
    changes: dict[str, float] = field(default_factory=dict)
    element: ServiceSpec | Bridge | LinkSpec | None = None
    index: int = field(default=0, compare=False)

    @property
    def target(self) -> str:
        if self.name is not None:
            return self.name
        if self.element is not None and not isinstance(self.element, LinkSpec):
            return self.element.name
        return f"{self.orig}->{self.dest}"


@dataclass(frozen=True)
class Traffic:
    """Offered load from one instance to another over ``[start_s, end_s)``."""

    src: str
    dst: str
    start_s: float
    end_s: float
    rate_bps: float = UNBOUNDED


def instance_name(service: str, index: int) -> str:
    return f"{service}-{index}"


def expand_link(spec: LinkSpec, first_id: int) -> list[Link]:
    """Directed links for one declared link, ids starting at ``first_id``."""
    links = [Link(first_id, spec.orig, spec.dest, spec.latency_ms, spec.up_bps,
                  spec.jitter_ms, spec.loss)]
    if spec.bidirectional:
        links.append(Link(first_id + 1, spec.dest, spec.orig, spec.latency_ms,
                          spec.down_bps, spec.jitter_ms, spec.loss))
    return links


@dataclass(frozen=True)
class NetworkState:
    """The graph at one point in time: services, bridges and directed links."""

    services: tuple[ServiceSpec, ...] = ()
    bridges: tuple[Bridge, ...] = ()
    links: tuple[Link, ...] = ()
    next_link_id: int = 0

    @cached_property
    def instances(self) -> tuple[str, ...]:
        return tuple(name for s in self.services for name in s.instances)

    @cached_property
    def instance_service(self) -> dict[str, str]:
        return {name: s.name for s in self.services for name in s.instances}

    def element_names(self) -> set[str]:
        return {s.name for s in self.services} | {b.name for b in self.bridges}

    def service(self, name: str) -> ServiceSpec | None:
        for s in self.services:
            if s.name == name:
                return s
        return None

    def link_by_id(self, link_id: int) -> Link:
        for link in self.links:
            if link.id == link_id:
                return link
        raise KeyError(link_id)


@dataclass(frozen=True)
class Topology:
    services: tuple[ServiceSpec, ...] = ()
    bridges: tuple[Bridge, ...] = ()
    link_specs: tuple[LinkSpec, ...] = ()
    events: tuple[DynamicEvent, ...] = ()
    workload: tuple[Traffic, ...] = ()

    @cached_property
    def links(self) -> tuple[Link, ...]:
        out: list[Link] = []
        for spec in self.link_specs:
            out.extend(expand_link(spec, len(out)))
        return tuple(out)

    @cached_property
    def instances(self) -> tuple[str, ...]:
        return tuple(name for s in self.services for name in s.instances)

    @cached_property
    def instance_service(self) -> dict[str, str]:
        return {name: s.name for s in self.services for name in s.instances}

    def initial_state(self) -> NetworkState:
        return NetworkState(self.services, self.bridges, self.links, len(self.links))


# --------------------------------------------------------------------------
# scalar parsing

_BW_RE = re.compile(r"^\s*([+-]?\d+(?:\.\d*)?)\s*([kKmMgG]?)(?:bps|b/s)?\s*$")
_BW_SCALE = {"": 1, "k": 10**3, "m": 10**6, "g": 10**9}


def parse_bandwidth(value: Any) -> int:
    """Bandwidth in bits per second from ``"10Mbps"``-style strings or integers.

    Suffixes are decimal (Kbps = 1000 bps). The result must be a whole number
    of bits per second.
    """
    if isinstance(value, bool):
        raise TopologyError(f"invalid bandwidth {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise TopologyError(f"bandwidth {value!r} is not a whole number of bps")
        return int(value)
    m = _BW_RE.match(str(value))
    if m is None:
        raise TopologyError(f"invalid bandwidth {value!r}")
    try:
        bps = Decimal(m.group(1)) * _BW_SCALE[m.group(2).lower()]
    except InvalidOperation as exc:  # pragma: no cover - regex guards this
        raise TopologyError(f"invalid bandwidth {value!r}") from exc
    if bps != bps.to_integral_value():
        raise TopologyError(f"bandwidth {value!r} is not a whole number of bps")
    return int(bps)


def format_bandwidth(bps: int) -> str:
    for suffix, scale in (("Gbps", 10**9), ("Mbps", 10**6), ("Kbps", 10**3)):
        if bps and bps % scale == 0:
            return f"{bps // scale}{suffix}"
    return str(bps)


def _rate(value: Any) -> float:
    if value is None or (isinstance(value, str) and value.strip().lower() in ("unbounded", "inf", "max")):
        return UNBOUNDED
    return float(parse_bandwidth(value))


def _number(value: Any, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TopologyError(f"{what}: expected a number, got {value!r}")
    return float(value)


# --------------------------------------------------------------------------
# parsing


class _Reader:
    """Checks mapping keys and converts fields, prefixing errors with a path."""

    def __init__(self, node: Any, where: str, allowed: tuple[str, ...]):
        if not isinstance(node, dict):
            raise ExperimentSyntaxError(f"{where}: expected a mapping, got {type(node).__name__}")
        unknown = [k for k in node if k not in allowed]
        if unknown:
            raise ExperimentSyntaxError(f"{where}: unknown field {unknown[0]!r}")
        self.node = node
        self.where = where

    def has(self, key: str) -> bool:
        return key in self.node

    def get(self, key: str, default: Any = None) -> Any:
        return self.node.get(key, default)

    def require(self, key: str) -> Any:
        if key not in self.node:
            raise ExperimentSyntaxError(f"{self.where}: missing {key!r}")
        return self.node[key]

    def name(self, key: str = "name") -> str:
        value = self.require(key)
        if not isinstance(value, (str, int)) or isinstance(value, bool):
            raise ExperimentSyntaxError(f"{self.where}: {key} must be a string")
        return str(value)

    def number(self, key: str, default: float | None = None) -> float:
        if key not in self.node:
            if default is None:
                raise ExperimentSyntaxError(f"{self.where}: missing {key!r}")
            return default
        try:
            return _number(self.node[key], f"{self.where}.{key}")
        except TopologyError as exc:
            raise ExperimentSyntaxError(str(exc)) from None

    def bandwidth(self, key: str) -> int | None:
        if key not in self.node:
            return None
        try:
            return parse_bandwidth(self.node[key])
        except TopologyError as exc:
            raise ExperimentSyntaxError(f"{self.where}.{key}: {exc}") from None


_SERVICE_KEYS = ("name", "image", "replicas", "tags")
_LINK_KEYS = ("orig", "dest", "latency", "up", "down", "jitter", "loss")
_EVENT_KEYS = ("time", "action", "name", "image", "replicas", "tags") + _LINK_KEYS
_TRAFFIC_KEYS = ("src", "dst", "start", "end", "rate")


def _list(node: Any, where: str) -> list:
    if node is None:
        return []
    if not isinstance(node, list):
        raise ExperimentSyntaxError(f"{where}: expected a list")
    return node


def _service(node: Any, where: str, keys: tuple[str, ...] = _SERVICE_KEYS) -> ServiceSpec:
    r = _Reader(node, where, keys)
    replicas = r.get("replicas", 1)
    if isinstance(replicas, bool) or not isinstance(replicas, int):
        raise ExperimentSyntaxError(f"{where}: replicas must be an integer")
    tags = r.get("tags") or {}
    if not isinstance(tags, dict):
        raise ExperimentSyntaxError(f"{where}: tags must be a mapping")
    return ServiceSpec(r.name(), str(r.get("image", "") or ""), replicas,
                       {str(k): str(v) for k, v in tags.items()})


def _link(node: Any, where: str, link_id: int, keys: tuple[str, ...] = _LINK_KEYS) -> LinkSpec:
    r = _Reader(node, where, keys)
    orig, dest = r.name("orig"), r.name("dest")
    up, down = r.bandwidth("up"), r.bandwidth("down")
    if up is None and down is None:
        raise ExperimentSyntaxError(f"{where}: a link needs 'up' and/or 'down' bandwidth")
    latency = r.number("latency")
    jitter = r.number("jitter", 0.0)
    loss = r.number("loss", 0.0)
    if up is None:
        # a lone 'down' describes traffic flowing dest -> orig
        orig, dest, up = dest, orig, down
        down = None
    return LinkSpec(link_id, orig, dest, latency, up, down, jitter, loss)


def _event(node: Any, where: str, index: int) -> DynamicEvent:
    r = _Reader(node, where, _EVENT_KEYS)
    time_s = r.number("time")
    action = r.get("action")
    is_link = r.has("orig") or r.has("dest")
    if action is None:
        if not is_link:
            raise ExperimentSyntaxError(f"{where}: property change needs 'orig' and 'dest'")
        changes: dict[str, float] = {}
        for key, prop in (("latency", "latency_ms"), ("jitter", "jitter_ms"), ("loss", "loss")):
            if r.has(key):
                changes[prop] = r.number(key)
        for key, prop in (("up", "up_bps"), ("down", "down_bps")):
            bw = r.bandwidth(key)
            if bw is not None:
                changes[prop] = bw
        if not changes:
            raise ExperimentSyntaxError(f"{where}: property change lists no properties")
        return DynamicEvent(time_s, "link-change", orig=r.name("orig"), dest=r.name("dest"),
                            changes=changes, index=index)
    if action == "leave":
        if is_link:
            return DynamicEvent(time_s, "leave", orig=r.name("orig"), dest=r.name("dest"), index=index)
        return DynamicEvent(time_s, "leave", name=r.name(), index=index)
    if action == "join":
        body = {k: v for k, v in node.items() if k not in ("time", "action")}
        if is_link:
            spec = _link(body, where, -1)
            return DynamicEvent(time_s, "join", orig=spec.orig, dest=spec.dest, element=spec, index=index)
        if "image" in body or "replicas" in body or "tags" in body:
            svc = _service(body, where)
            return DynamicEvent(time_s, "join", name=svc.name, element=svc, index=index)
        bridge = Bridge(_Reader(body, where, ("name",)).name())
        return DynamicEvent(time_s, "join", name=bridge.name, element=bridge, index=index)
    raise ExperimentSyntaxError(f"{where}: unknown action {action!r}")


def _traffic(node: Any, where: str) -> Traffic:
    r = _Reader(node, where, _TRAFFIC_KEYS)
    try:
        rate = _rate(r.get("rate"))
    except TopologyError as exc:
        raise ExperimentSyntaxError(f"{where}.rate: {exc}") from None
    end = r.get("end")
    return Traffic(r.name("src"), r.name("dst"), r.number("start", 0.0),
                   math.inf if end is None else r.number("end"), rate)


def parse_experiment(text: str, *, check: bool = True) -> Topology:
    """Parse experiment-file text into a :class:`Topology`.

    Parameters
    ----------
    text : str
        Contents of an experiment file.
    check : bool
        When true (the default) the parsed topology is validated and a
        :class:`ValidationError` carrying every diagnostic is raised if any
        invariant fails. With ``check=False`` only syntax errors raise.
    """
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ExperimentSyntaxError(str(exc.problem), mark.line + 1 if mark else None,
                                    mark.column + 1 if mark else None) from None
    except yaml.YAMLError as exc:  # pragma: no cover - unmarked scanner errors
        raise ExperimentSyntaxError(str(exc)) from None
    if doc is None:
        doc = {}
    top = _Reader(doc, "<top>", ("experiment", "dynamic", "workload"))
    exp = _Reader(top.get("experiment") or {}, "experiment", ("services", "bridges", "links"))

    services = tuple(_service(n, f"experiment.services[{i}]")
                     for i, n in enumerate(_list(exp.get("services"), "experiment.services")))
    bridges = tuple(Bridge(_Reader(n, f"experiment.bridges[{i}]", ("name",)).name())
                    for i, n in enumerate(_list(exp.get("bridges"), "experiment.bridges")))
    specs = tuple(_link(n, f"experiment.links[{i}]", i)
                  for i, n in enumerate(_list(exp.get("links"), "experiment.links")))
    events = [_event(n, f"dynamic[{i}]", i) for i, n in enumerate(_list(top.get("dynamic"), "dynamic"))]
    events.sort(key=lambda e: (e.time_s, e.index))
    workload = tuple(_traffic(n, f"workload[{i}]")
                     for i, n in enumerate(_list(top.get("workload"), "workload")))

    topo = Topology(services, bridges, specs, tuple(events), workload)
    if check:
        diagnostics = validate(topo)
        if diagnostics:
            raise ValidationError(diagnostics)
    return topo


def load_experiment(path, *, check: bool = True) -> Topology:
    with open(path, encoding="utf-8") as fh:
        return parse_experiment(fh.read(), check=check)


# --------------------------------------------------------------------------
# validation


def _check_link(spec: LinkSpec, names: set[str], label: str) -> list[str]:
    out = []
    for end in (spec.orig, spec.dest):
        if end not in names:
            out.append(f"{label}: unknown endpoint {end!r}")
    if spec.orig == spec.dest:
        out.append(f"{label}: orig equals dest")
    if spec.up_bps <= 0 or (spec.down_bps is not None and spec.down_bps <= 0):
        out.append(f"{label}: bandwidth must be positive")
    if not 0.0 <= spec.loss <= 1.0:
        out.append(f"{label}: loss outside [0,1]")
    if spec.latency_ms < 0:
        out.append(f"{label}: negative latency")
    if spec.jitter_ms < 0:
        out.append(f"{label}: negative jitter")
    return out


def _check_service(svc: ServiceSpec, label: str) -> list[str]:
    return [f"{label}: replicas must be >= 1"] if svc.replicas < 1 else []


def validate(t: Topology) -> list[str]:
    """Diagnostics for a topology; an empty list means it is usable.

    Besides static invariants this dry-runs every dynamic event in time order
    and reports events that would not apply to the state at their time.
    """
    from .dynamics import EventError, apply_event

    diags: list[str] = []
    seen: set[str] = set()
    for svc in t.services:
        if svc.name in seen:
            diags.append(f"duplicate service name {svc.name!r}")
        seen.add(svc.name)
        diags += _check_service(svc, f"service {svc.name!r}")
    bridge_names: set[str] = set()
    for b in t.bridges:
        if b.name in bridge_names:
            diags.append(f"duplicate bridge name {b.name!r}")
        elif b.name in seen:
            diags.append(f"name {b.name!r} used by both a service and a bridge")
        bridge_names.add(b.name)
    names = seen | bridge_names
    for spec in t.link_specs:
        diags += _check_link(spec, names, f"link {spec.id} ({spec.orig}->{spec.dest})")

    for tr in t.workload:
        if tr.end_s < tr.start_s:
            diags.append(f"workload {tr.src}->{tr.dst}: end before start")
        if tr.rate_bps < 0:
            diags.append(f"workload {tr.src}->{tr.dst}: negative rate")

    if diags:
        return diags

    state = t.initial_state()
    for ev in t.events:
        label = f"event {ev.index} (t={ev.time_s:g})"
        if ev.time_s < 0:
            diags.append(f"{label}: negative time")
        if isinstance(ev.element, LinkSpec):
            problems = [p for p in _check_link(ev.element, state.element_names(), label)
                        if "unknown endpoint" not in p]
            if problems:
                diags += problems
                continue
        elif isinstance(ev.element, ServiceSpec):
            problems = _check_service(ev.element, label)
            if problems:
                diags += problems
                continue
        if ev.kind == "link-change" and "loss" in ev.changes and not 0 <= ev.changes["loss"] <= 1:
            diags.append(f"{label}: loss outside [0,1]")
            continue
        try:
            state = apply_event(state, ev)
        except EventError as exc:
            diags.append(f"{label}: {exc}")
    return diags


# --------------------------------------------------------------------------
# serialization


def _service_dict(s: ServiceSpec) -> dict:
    d: dict[str, Any] = {"name": s.name, "image": s.image}
    if s.replicas != 1:
        d["replicas"] = s.replicas
    if s.tags:
        d["tags"] = dict(s.tags)
    return d


def _link_dict(spec: LinkSpec) -> dict:
    d: dict[str, Any] = {"orig": spec.orig, "dest": spec.dest, "latency": spec.latency_ms,
                         "up": format_bandwidth(spec.up_bps)}
    if spec.down_bps is not None:
        d["down"] = format_bandwidth(spec.down_bps)
    if spec.jitter_ms:
        d["jitter"] = spec.jitter_ms
    if spec.loss:
        d["loss"] = spec.loss
    return d


def _event_dict(ev: DynamicEvent) -> dict:
    if ev.kind == "link-change":
        d: dict[str, Any] = {"orig": ev.orig, "dest": ev.dest}
        keys = {"latency_ms": "latency", "jitter_ms": "jitter", "loss": "loss"}
        for prop, value in ev.changes.items():
            if prop in keys:
                d[keys[prop]] = value
            else:
                d["up" if prop == "up_bps" else "down"] = format_bandwidth(int(value))
    elif ev.kind == "leave":
        d = {"action": "leave"}
        if ev.name is not None:
            d["name"] = ev.name
        else:
            d.update(orig=ev.orig, dest=ev.dest)
    else:
        d = {"action": "join"}
        el = ev.element
        if isinstance(el, LinkSpec):
            d.update(_link_dict(el))
        elif isinstance(el, ServiceSpec):
            d.update(_service_dict(el))
        else:
            d["name"] = el.name
    d["time"] = ev.time_s
    return d


def _traffic_dict(tr: Traffic) -> dict:
    d: dict[str, Any] = {"src": tr.src, "dst": tr.dst, "start": tr.start_s}
    if not math.isinf(tr.end_s):
        d["end"] = tr.end_s
    d["rate"] = "unbounded" if math.isinf(tr.rate_bps) else format_bandwidth(int(tr.rate_bps))
    return d


def dump_experiment(t: Topology) -> str:
    """Canonical experiment-file text; ``parse_experiment`` inverts it."""
    doc: dict[str, Any] = {
        "experiment": {
            "services": [_service_dict(s) for s in t.services],
            "bridges": [{"name": b.name} for b in t.bridges],
            "links": [_link_dict(spec) for spec in t.link_specs],
        }
    }
    if t.events:
        doc["dynamic"] = [_event_dict(ev) for ev in t.events]
    if t.workload:
        doc["workload"] = [_traffic_dict(tr) for tr in t.workload]
    return yaml.dump(doc, Dumper=_Dumper, sort_keys=False, default_flow_style=False)
