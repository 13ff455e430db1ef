"""Pre-computed topology snapshots for experiments with dynamic events."""
from __future__ import annotations

import bisect
import hashlib
import json
import pickle
from dataclasses import dataclass, replace
from itertools import groupby
from pathlib import Path

from .collapse import CollapsedTopology, collapse_topology
from .topology import (
    Bridge,
    DynamicEvent,
    LinkSpec,
    NetworkState,
    ServiceSpec,
    Topology,
    TopologyError,
    dump_experiment,
    expand_link,
)

__all__ = [
    "EventError",
    "Snapshot",
    "SnapshotSequence",
    "apply_event",
    "build_snapshot_sequence",
    "snapshot_at",
]

_CACHE_VERSION = "1"


class EventError(TopologyError):
    """A dynamic event does not apply to the graph state at its time."""


def _without_element(state: NetworkState, name: str) -> NetworkState:
    return replace(
        state,
        services=tuple(s for s in state.services if s.name != name),
        bridges=tuple(b for b in state.bridges if b.name != name),
        links=tuple(l for l in state.links if name not in (l.orig, l.dest)),
    )


def apply_event(state: NetworkState, e: DynamicEvent) -> NetworkState:
    """The graph state after event ``e``; the input state is left untouched."""
    names = state.element_names()
    if e.kind == "link-change":
        fwd = [l for l in state.links if l.orig == e.orig and l.dest == e.dest]
        if not fwd:
            raise EventError(f"link-change of unknown link {e.orig}->{e.dest}")
        rev = [l for l in state.links if l.orig == e.dest and l.dest == e.orig]
        if "down_bps" in e.changes and not rev:
            raise EventError(f"link-change sets 'down' but {e.dest}->{e.orig} does not exist")
        common = {k: e.changes[k] for k in ("latency_ms", "jitter_ms", "loss") if k in e.changes}
        fwd_ids = {l.id for l in fwd}
        rev_ids = {l.id for l in rev}
        links = []
        for l in state.links:
            if l.id in fwd_ids:
                l = replace(l, **common)
                if "up_bps" in e.changes:
                    l = replace(l, bandwidth_bps=int(e.changes["up_bps"]))
            elif l.id in rev_ids:
                l = replace(l, **common)
                if "down_bps" in e.changes:
                    l = replace(l, bandwidth_bps=int(e.changes["down_bps"]))
            links.append(l)
        return replace(state, links=tuple(links))

    if e.kind == "leave":
        if e.name is not None:
            if e.name not in names:
                raise EventError(f"leave of unknown element {e.name!r}")
            return _without_element(state, e.name)
        pair = {(e.orig, e.dest), (e.dest, e.orig)}
        kept = tuple(l for l in state.links if (l.orig, l.dest) not in pair)
        if len(kept) == len(state.links):
            raise EventError(f"leave of unknown link {e.orig}->{e.dest}")
        return replace(state, links=kept)

    if e.kind == "join":
        el = e.element
        if isinstance(el, LinkSpec):
            for end in (el.orig, el.dest):
                if end not in names:
                    raise EventError(f"join of link with unknown endpoint {end!r}")
            if any(l.orig == el.orig and l.dest == el.dest for l in state.links):
                raise EventError(f"join of existing link {el.orig}->{el.dest}")
            new = expand_link(el, state.next_link_id)
            return replace(state, links=state.links + tuple(new),
                           next_link_id=state.next_link_id + len(new))
        if el.name in names:
            raise EventError(f"join of existing element {el.name!r}")
        if isinstance(el, ServiceSpec):
            return replace(state, services=state.services + (el,))
        if isinstance(el, Bridge):
            return replace(state, bridges=state.bridges + (el,))
    raise EventError(f"unsupported event kind {e.kind!r}")


@dataclass(frozen=True)
class Snapshot:
    index: int
    effective_from_s: float
    state: NetworkState
    collapsed: CollapsedTopology
    events: tuple[DynamicEvent, ...] = ()

    @property
    def changed_elements(self) -> tuple[str, ...]:
        return tuple(ev.target for ev in self.events)


@dataclass(frozen=True)
class SnapshotSequence:
    snapshots: tuple[Snapshot, ...]

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, i: int) -> Snapshot:
        return self.snapshots[i]

    def __iter__(self):
        return iter(self.snapshots)

    @property
    def times(self) -> list[float]:
        return [s.effective_from_s for s in self.snapshots]

    @property
    def instances(self) -> tuple[str, ...]:
        """Every instance that exists in at least one snapshot, in first-seen order."""
        seen: dict[str, None] = {}
        for snap in self.snapshots:
            for name in snap.state.instances:
                seen.setdefault(name)
        return tuple(seen)

    @property
    def link_id_width(self) -> int:
        """Bytes per link id on the wire: 1 while every id fits in a byte."""
        total = max((s.state.next_link_id for s in self.snapshots), default=0)
        return 1 if total <= 256 else 2

    def schedule(self) -> list[tuple[float, tuple[str, ...], int]]:
        return [(s.effective_from_s, s.changed_elements, len(s.collapsed)) for s in self.snapshots]

    def to_json(self) -> str:
        """Canonical text form of every snapshot, for determinism checks."""
        doc = []
        for snap in self.snapshots:
            st = snap.state
            doc.append({
                "time_s": snap.effective_from_s,
                "events": [ev.target for ev in snap.events],
                "services": [[s.name, s.replicas] for s in st.services],
                "bridges": [b.name for b in st.bridges],
                "links": [[l.id, l.orig, l.dest, l.latency_ms, l.bandwidth_bps, l.jitter_ms, l.loss]
                          for l in st.links],
                "paths": [[p.src, p.dst, p.latency_ms, p.jitter_ms, p.loss, p.max_bandwidth_bps,
                           p.rtt_ms, list(p.link_ids)] for p in snap.collapsed.pairs()],
            })
        return json.dumps(doc, separators=(",", ":"))


def build_snapshot_sequence(t: Topology, cache_dir: str | Path | None = None) -> SnapshotSequence:
    """Apply events in time order, one snapshot per distinct event time.

    Events sharing a time fold into a single snapshot and apply in file
    order. Events at time 0 fold into the initial snapshot. With
    ``cache_dir`` the sequence is pickled under a hash of the experiment
    content and reused on later calls.
    """
    cache_file = None
    if cache_dir is not None:
        digest = hashlib.sha256((_CACHE_VERSION + dump_experiment(t)).encode()).hexdigest()
        cache_file = Path(cache_dir) / f"snapshots-{digest}.pkl"
        if cache_file.exists():
            with open(cache_file, "rb") as fh:
                return pickle.load(fh)

    state = t.initial_state()
    initial_events: tuple[DynamicEvent, ...] = ()
    snaps: list[Snapshot] = []
    groups = [(time, tuple(evs)) for time, evs in groupby(t.events, key=lambda ev: ev.time_s)]
    if groups and groups[0][0] <= 0.0:
        initial_events = groups.pop(0)[1]
        for ev in initial_events:
            state = apply_event(state, ev)
    snaps.append(Snapshot(0, 0.0, state, collapse_topology(state), initial_events))
    for time, evs in groups:
        for ev in evs:
            state = apply_event(state, ev)
        snaps.append(Snapshot(len(snaps), float(time), state, collapse_topology(state), evs))
    seq = SnapshotSequence(tuple(snaps))

    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_file.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump(seq, fh, protocol=pickle.HIGHEST_PROTOCOL)
        tmp.replace(cache_file)
    return seq


def snapshot_at(seq: SnapshotSequence, t_s: float) -> Snapshot:
    """The snapshot governing time ``t_s``: greatest start time not after it."""
    i = bisect.bisect_right(seq.times, t_s) - 1
    return seq.snapshots[max(i, 0)]
