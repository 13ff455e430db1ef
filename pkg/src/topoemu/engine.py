"""The decentralized emulation loop and the lockstep experiment driver.

Each :class:`EmulationManager` owns some service instances. Every tick it
reads per-destination byte counters from its instances' enforcement
backends, reports the active flows to its peers, merges the peers' reports
and enforces the resulting bandwidth shares at the source.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .backend import EnforcementBackend, SimulatedBackend, instance_address
from .dynamics import Snapshot, SnapshotSequence, build_snapshot_sequence, snapshot_at
from .sharing import UNBOUNDED, congestion_loss_rates, solve_allocations
from .topology import Topology, TopologyError
from .wire import DEFAULT_PORT, FlowUsage, MetadataMessage, WireError, decode_metadata, split_datagrams

__all__ = [
    "CSV_COLUMNS",
    "DEFAULT_TICK_S",
    "EmulationManager",
    "EngineError",
    "ExperimentResult",
    "PartitionError",
    "TickReport",
    "TickRow",
    "WorkloadError",
    "WorkloadSpec",
    "partition_instances",
    "run_experiment",
    "write_csv",
]

log = logging.getLogger(__name__)

DEFAULT_TICK_S = 0.05
STALE_TICKS = 10
GREEDY_TOLERANCE = 1e-3  # usage within this fraction of the allocation counts as saturating
MIN_RTT_MS = 1e-3
CSV_COLUMNS = ("time_s", "manager", "src", "dst", "demand_bps", "allocated_bps",
               "loss", "latency_ms", "jitter_ms")


class EngineError(RuntimeError):
    pass


class PartitionError(EngineError):
    pass


class WorkloadError(TopologyError):
    pass


# --------------------------------------------------------------------------
# workload


Segment = tuple[float, float, float]


@dataclass(frozen=True)
class WorkloadSpec:
    """Offered load per ordered instance pair as ``(start_s, end_s, rate_bps)`` segments."""

    segments: Mapping[tuple[str, str], tuple[Segment, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for pair, segs in self.segments.items():
            ordered = sorted(segs)
            for (s0, e0, _), (s1, _, _) in zip(ordered, ordered[1:]):
                if s1 < e0:
                    raise WorkloadError(f"overlapping workload segments for {pair[0]}->{pair[1]}")
            for s, e, r in ordered:
                if e < s or r < 0:
                    raise WorkloadError(f"bad workload segment {(s, e, r)} for {pair[0]}->{pair[1]}")

    @classmethod
    def from_topology(cls, t: Topology, seq: SnapshotSequence | None = None) -> "WorkloadSpec":
        """Resolve the experiment's ``workload`` block to instance pairs.

        A bare service name stands for its only instance and is rejected
        for replicated services.
        """
        seq = seq if seq is not None else build_snapshot_sequence(t)
        known = set(seq.instances)
        replicas: dict[str, int] = {}
        for snap in seq:
            for s in snap.state.services:
                replicas[s.name] = max(replicas.get(s.name, 0), s.replicas)

        def resolve(name: str) -> str:
            if name in known:
                return name
            if replicas.get(name) == 1:
                return f"{name}-0"
            if name in replicas:
                raise WorkloadError(f"workload names replicated service {name!r}; use an instance name")
            raise WorkloadError(f"workload names unknown instance {name!r}")

        out: dict[tuple[str, str], list[Segment]] = {}
        for tr in t.workload:
            pair = (resolve(tr.src), resolve(tr.dst))
            if pair[0] == pair[1]:
                raise WorkloadError(f"workload flow from {pair[0]} to itself")
            out.setdefault(pair, []).append((tr.start_s, tr.end_s, tr.rate_bps))
        return cls({p: tuple(sorted(s)) for p, s in out.items()})

    def sources(self) -> set[str]:
        return {src for src, _ in self.segments}

    def for_source(self, src: str) -> dict[str, tuple[Segment, ...]]:
        return {dst: segs for (s, dst), segs in self.segments.items() if s == src}


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class TickRow:
    time_s: float
    manager: int
    src: str
    dst: str
    demand_bps: float
    allocated_bps: int
    loss: float
    latency_ms: float
    jitter_ms: float


@dataclass(frozen=True)
class TickReport:
    time_s: float
    manager: int
    snapshot: int
    rows: tuple[TickRow, ...]
    metadata_bytes: int
    datagrams: int


@dataclass
class _LocalFlow:
    src: str
    dst: str
    demand: float
    usage_bps: float
    rtt_ms: float
    link_ids: tuple[int, ...]
    latency_ms: float
    jitter_ms: float
    path_loss: float


# --------------------------------------------------------------------------
# manager


def _fmt_pair(src: str, dst: str) -> str:
    return f"{src}->{dst}"


class EmulationManager:
    """One emulation manager.

    Parameters
    ----------
    manager_id : int
        Sender id on the wire.
    owned : sequence of str
        Instances whose outbound traffic this manager shapes.
    sequence : SnapshotSequence
        Pre-computed topology snapshots.
    backends : mapping
        Enforcement backend per owned instance.
    tick_s : float
        Loop period.
    n_peers : int
        Number of other managers; metadata bytes count once per peer.
    """

    def __init__(self, manager_id: int, owned: Sequence[str], sequence: SnapshotSequence,
                 backends: Mapping[str, EnforcementBackend], *, tick_s: float = DEFAULT_TICK_S,
                 n_peers: int = 0, control_port: int = DEFAULT_PORT, stale_ticks: int = STALE_TICKS):
        if tick_s <= 0:
            raise ValueError("tick length must be positive")
        missing = [name for name in owned if name not in backends]
        if missing:
            raise EngineError(f"manager {manager_id}: no backend for {missing}")
        self.manager_id = manager_id
        self.owned = tuple(owned)
        self.sequence = sequence
        self.backends = dict(backends)
        self.tick_s = tick_s
        self.n_peers = n_peers
        self.stale_ticks = stale_ticks
        self.id_width = sequence.link_id_width
        self._instances = sequence.instances
        self.address = {name: instance_address(i) for i, name in enumerate(self._instances)}

        self.snapshot: Snapshot | None = None
        self.local_flows: dict[tuple[str, str], _LocalFlow] = {}
        self.remote: dict[int, tuple[int, tuple[FlowUsage, ...]]] = {}
        self._inbox: list[bytes] = []
        self._tick_no = 0
        self._caps: dict[tuple[str, str], int] = {}
        self._path_props: dict[tuple[str, str], tuple] = {}
        self._sent: dict[tuple[str, str], int] = {}
        self._remote_alloc: dict[tuple[int, ...], float] = {}
        self._rtt_cache: dict[tuple[int, ...], float | None] = {}
        self._solve_cache: OrderedDict = OrderedDict()
        self._outbox: list[bytes] = []

        for name in self.owned:
            self._call(name, None, "init", control_port)
        self._install(snapshot_at(sequence, 0.0))

    # -- backend plumbing --------------------------------------------------

    def _call(self, src: str, dst: str | None, op: str, *args):
        try:
            return getattr(self.backends[src], op)(*args)
        except Exception as exc:
            where = f"manager {self.manager_id}, instance {src}"
            if dst is not None:
                where += f", destination {dst} ({self.address.get(dst)})"
            raise EngineError(f"backend {op} failed ({where}): {exc}") from exc

    def _set_cap(self, src: str, dst: str, bps: int) -> None:
        if self._caps.get((src, dst)) != bps:
            self._call(src, dst, "change_bandwidth", self.address[dst], bps)
            self._caps[(src, dst)] = bps

    def _install(self, snap: Snapshot) -> None:
        ct = snap.collapsed
        present = set(snap.state.instances)
        for src in self.owned:
            for dst in self._instances:
                if dst == src:
                    continue
                key = (src, dst)
                path = ct.path(src, dst) if src in present and dst in present else None
                if path is None:
                    if key in self._caps:
                        self._set_cap(src, dst, 0)
                    elif src in present and dst in present:
                        self._call(src, dst, "init_destination", self.address[dst], 0, 0.0, 0.0, 0.0)
                        self._caps[key] = 0
                    self._path_props.pop(key, None)
                    continue
                props = (path.max_bandwidth_bps, path.latency_ms, path.jitter_ms, path.loss, path.link_ids)
                if self._path_props.get(key) != props:
                    # new or changed path: shape to its properties and reset the cap
                    self._call(src, dst, "init_destination", self.address[dst], path.max_bandwidth_bps,
                               path.latency_ms, path.jitter_ms, path.loss)
                    self._caps[key] = path.max_bandwidth_bps
                    self._path_props[key] = props
        self.snapshot = snap
        self._rtt_cache.clear()
        self._remote_alloc.clear()
        self._watch = {}
        self._path_info = {}
        for src in self.owned:
            if src not in present:
                continue
            watched = []
            for dst in self._instances:
                key = (src, dst)
                if dst == src or dst not in present or key not in self._caps:
                    continue
                watched.append((dst, self.address[dst], key))
                path = ct.path(src, dst)
                self._path_info[key] = None if path is None else (
                    self._rtt(path), path.link_ids, path.latency_ms, path.jitter_ms, path.loss)
            self._watch[src] = watched

    @staticmethod
    def _rtt(path) -> float:
        # one-way links have no way back; assume a symmetric return path
        rtt = path.rtt_ms if math.isfinite(path.rtt_ms) else 2.0 * path.latency_ms
        return max(rtt, MIN_RTT_MS)

    def _remote_rtt(self, link_ids: tuple[int, ...]) -> float | None:
        if link_ids in self._rtt_cache:
            return self._rtt_cache[link_ids]
        ct = self.snapshot.collapsed
        rtt = None
        if link_ids and all(lid in ct.links for lid in link_ids):
            src_svc, dst_svc = ct.links[link_ids[0]].orig, ct.links[link_ids[-1]].dest
            src_spec, dst_spec = self.snapshot.state.service(src_svc), self.snapshot.state.service(dst_svc)
            if src_spec is not None and dst_spec is not None:
                src = src_spec.instances[0]
                dst = dst_spec.instances[1 if src_svc == dst_svc else 0]
                if ct.link_ids(src, dst) == link_ids:
                    rtt = self._rtt(ct.path(src, dst))
        self._rtt_cache[link_ids] = rtt
        return rtt

    # -- the loop ----------------------------------------------------------

    def receive(self, datagram: bytes) -> None:
        """Buffer a metadata datagram for the next :meth:`enforce`."""
        self._inbox.append(datagram)

    def collect(self, now_s: float) -> list[bytes]:
        """Steps 1-3: clear flows, read usage counters, build the outgoing datagrams."""
        snap = snapshot_at(self.sequence, now_s)
        if snap.index != self.snapshot.index:
            self._install(snap)
        self._tick_no += 1
        self.local_flows = {}

        sent_before = self._sent
        to_bps = 8.0 / self.tick_s
        for src, watched in self._watch.items():
            backend = self.backends[src]
            offered_api = getattr(backend, "query_offered", None)
            dst = None
            try:
                backend.update_usage()
                for dst, ip, key in watched:
                    sent = backend.query_usage(ip)
                    delta = sent - sent_before.get(key, 0)
                    sent_before[key] = sent
                    if delta < 0:
                        raise EngineError("usage counter went backwards")
                    usage_bps = delta * to_bps
                    if offered_api is not None:
                        demand = float(offered_api(ip))
                        if demand <= 0:
                            continue
                    else:
                        if delta <= 0:
                            continue
                        cap = self._caps[key]
                        demand = UNBOUNDED if usage_bps >= (1 - GREEDY_TOLERANCE) * cap else usage_bps
                    info = self._path_info[key]
                    if info is None:
                        self.local_flows[key] = _LocalFlow(src, dst, demand, usage_bps, 0.0, (),
                                                           math.nan, math.nan, 1.0)
                    else:
                        self.local_flows[key] = _LocalFlow(src, dst, demand, usage_bps, *info)
            except EngineError as exc:
                raise EngineError(f"manager {self.manager_id}, {_fmt_pair(src, dst)}: {exc}") from exc
            except Exception as exc:
                where = f"manager {self.manager_id}, instance {src}"
                if dst is not None:
                    where += f", destination {dst} ({self.address.get(dst)})"
                raise EngineError(f"backend query failed ({where}): {exc}") from exc

        flows = tuple(FlowUsage(min(int(f.usage_bps), 2**32 - 1), f.link_ids)
                      for f in self.local_flows.values() if f.link_ids)
        self._outbox = split_datagrams(MetadataMessage(self.manager_id, flows), self.id_width)
        return list(self._outbox)

    def _merge_remote(self) -> None:
        fresh: dict[int, list[FlowUsage]] = {}
        for data in self._inbox:
            try:
                msg = decode_metadata(data, self.id_width)
            except WireError as exc:
                log.warning("manager %d dropped malformed datagram: %s", self.manager_id, exc)
                continue
            if msg.sender_id == self.manager_id:
                continue
            fresh.setdefault(msg.sender_id, []).extend(msg.flows)
        self._inbox = []
        for sender, flows in fresh.items():
            self.remote[sender] = (self._tick_no, tuple(flows))
        for sender in [s for s, (seen, _) in self.remote.items() if self._tick_no - seen > self.stale_ticks]:
            log.info("manager %d ages out silent peer %d", self.manager_id, sender)
            del self.remote[sender]

    def enforce(self, now_s: float) -> TickReport:
        """Steps 4-5: merge peer reports, solve the shares and apply them."""
        self._merge_remote()
        caps_by_link = {lid: float(l.bandwidth_bps) for lid, l in self.snapshot.collapsed.links.items()}

        local = [f for f in self.local_flows.values() if f.link_ids]
        local_links = {lid for f in local for lid in f.link_ids}
        flow_links: list[tuple[int, ...]] = [f.link_ids for f in local]
        rtts: list[float] = [f.rtt_ms for f in local]
        demands: list[float] = [f.demand for f in local]
        remote = self._relevant_remote(local_links)
        for _, link_ids, usage, rtt, greedy in remote:
            flow_links.append(link_ids)
            rtts.append(rtt)
            demands.append(UNBOUNDED if greedy else float(usage))

        alloc = self._solve(flow_links, rtts, demands, caps_by_link) if flow_links else []
        for k, (key, _, _, _, greedy) in enumerate(remote):
            if greedy:
                self._remote_alloc[key] = alloc[len(local) + k]

        # congestion loss per link over the flows this manager sees
        loss_on: dict[int, dict[int, float]] = {}
        for lid in local_links:
            members = [i for i, fl in enumerate(flow_links) if lid in fl]
            rates = congestion_loss_rates([demands[i] for i in members], [alloc[i] for i in members],
                                          caps_by_link[lid])
            loss_on[lid] = dict(zip(members, rates))

        rows = []
        index = {(f.src, f.dst): i for i, f in enumerate(local)}
        for key in sorted(self.local_flows):
            f = self.local_flows[key]
            if f.link_ids:
                i = index[key]
                granted = int(alloc[i])
                self._set_cap(f.src, f.dst, granted)
                congestion = max((loss_on[lid].get(i, 0.0) for lid in f.link_ids), default=0.0)
                loss = 1.0 - (1.0 - f.path_loss) * (1.0 - congestion)
            else:
                granted, loss = 0, 1.0
            rows.append(TickRow(now_s, self.manager_id, f.src, f.dst, f.demand, granted, loss,
                                f.latency_ms, f.jitter_ms))
        size = sum(len(d) for d in self._outbox)
        return TickReport(now_s, self.manager_id, self.snapshot.index, tuple(rows),
                          size * self.n_peers, len(self._outbox))

    def _relevant_remote(self, local_links: set[int]) -> list[tuple]:
        """Remote flows that share links with local flows, directly or through other remote flows.

        Each entry is ``(key, link_ids, usage_bps, rtt_ms, greedy)``. A remote
        flow counts as greedy unless its usage stays below the share it got
        the last time it was treated as greedy; the comparison against that
        share rather than the latest estimate keeps a demand-limited flow
        from flipping between the two views.
        """
        candidates = []
        for sender, (_, flows) in sorted(self.remote.items()):
            seen: dict[tuple[int, ...], int] = {}
            for fu in flows:
                n = seen[fu.link_ids] = seen.get(fu.link_ids, -1) + 1
                rtt = self._remote_rtt(fu.link_ids)
                if rtt is None:
                    continue  # reported against another snapshot
                candidates.append(((sender, fu.link_ids, n), fu.link_ids, fu.used_bandwidth_bps, rtt))
        reach = set(local_links)
        picked = [False] * len(candidates)
        grew = True
        while grew:
            grew = False
            for i, c in enumerate(candidates):
                if not picked[i] and not reach.isdisjoint(c[1]):
                    picked[i] = grew = True
                    reach.update(c[1])
        slack = 8.0 / self.tick_s  # byte counters round down
        out = []
        for i, (key, link_ids, usage, rtt) in enumerate(candidates):
            if picked[i]:
                ref = self._remote_alloc.get(key)
                greedy = ref is None or usage >= (1 - GREEDY_TOLERANCE) * ref - slack
                out.append((key, link_ids, usage, rtt, greedy))
        return out

    def tick(self, now_s: float) -> TickReport:
        """All five steps against whatever peer datagrams are already buffered."""
        self.collect(now_s)
        return self.enforce(now_s)

    def _solve(self, flow_links, rtts, demands, capacities) -> list[float]:
        key = (tuple(flow_links), tuple(rtts), tuple(demands), self.snapshot.index)
        hit = self._solve_cache.get(key)
        if hit is not None:
            self._solve_cache.move_to_end(key)
            return hit
        result = solve_allocations(flow_links, rtts, demands, capacities)
        self._solve_cache[key] = result
        if len(self._solve_cache) > 4096:
            self._solve_cache.popitem(last=False)
        return result

    def tear_down(self) -> None:
        for name in self.owned:
            self._call(name, None, "tear_down")


# --------------------------------------------------------------------------
# experiment driver


@dataclass
class ExperimentResult:
    rows: list[TickRow]
    metadata: list[tuple[float, int, int]]  # (time_s, manager, bytes sent to peers)
    tick_s: float
    duration_s: float
    partition: tuple[tuple[str, ...], ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        write_csv(self.rows, buf)
        return buf.getvalue()

    def series(self, src: str, dst: str) -> list[tuple[float, int]]:
        return [(r.time_s, r.allocated_bps) for r in self.rows if r.src == src and r.dst == dst]


def _fmt(x: float) -> str:
    if isinstance(x, int):
        return str(x)
    if math.isinf(x):
        return "inf"
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return format(x, ".9g")


def write_csv(rows: Iterable[TickRow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([format(r.time_s, ".9g"), r.manager, r.src, r.dst, _fmt(r.demand_bps),
                    r.allocated_bps, format(r.loss, ".9g"), format(r.latency_ms, ".9g"),
                    format(r.jitter_ms, ".9g")])


def partition_instances(instances: Sequence[str], managers) -> tuple[tuple[str, ...], ...]:
    """Normalize ``managers`` to a partition of ``instances``.

    An integer deals instances round-robin; a sequence of groups is checked
    to cover every instance exactly once.
    """
    if isinstance(managers, int):
        if managers < 1:
            raise PartitionError("manager count must be at least 1")
        return tuple(tuple(instances[i::managers]) for i in range(managers))
    groups = tuple(tuple(g) for g in managers)
    if not groups:
        raise PartitionError("empty partition")
    seen: dict[str, int] = {}
    for m, g in enumerate(groups):
        for name in g:
            if name in seen:
                raise PartitionError(f"instance {name!r} assigned to managers {seen[name]} and {m}")
            seen[name] = m
    unknown = sorted(set(seen) - set(instances))
    if unknown:
        raise PartitionError(f"partition names unknown instances {unknown}")
    gap = [name for name in instances if name not in seen]
    if gap:
        raise PartitionError(f"instances without a manager: {gap}")
    return groups


def tick_times(duration_s: float, tick_s: float) -> list[float]:
    n = int(math.floor(duration_s / tick_s + 1e-9))
    return [round(k * tick_s, 9) for k in range(1, n + 1)]


def make_backends(instances: Iterable[str], workload: WorkloadSpec,
                  address: Mapping[str, str]) -> dict[str, SimulatedBackend]:
    out = {}
    for src in instances:
        demand = {address[dst]: segs for dst, segs in workload.for_source(src).items()}
        out[src] = SimulatedBackend(demand)
    return out


def run_experiment(t: Topology, w: WorkloadSpec | None = None, managers=1, *,
                   duration_s: float, tick_s: float = DEFAULT_TICK_S, distributed: bool = False,
                   base_port: int = DEFAULT_PORT, sequence: SnapshotSequence | None = None,
                   cache_dir=None) -> ExperimentResult:
    """Run an experiment and collect one row per active flow per tick.

    Parameters
    ----------
    t : Topology
    w : WorkloadSpec, optional
        Offered load; defaults to the experiment's own ``workload`` block.
    managers : int or sequence of instance groups
        Manager count (round-robin partition) or an explicit partition.
    duration_s, tick_s : float
        Simulated run length and loop period.
    distributed : bool
        Run one OS process per manager exchanging datagrams over loopback
        UDP instead of passing them in memory.
    base_port : int
        First UDP port in distributed mode; 0 picks free ports.
    """
    if duration_s < 0:
        raise ValueError("duration must be non-negative")
    if tick_s <= 0:
        raise ValueError("tick length must be positive")
    seq = sequence if sequence is not None else build_snapshot_sequence(t, cache_dir)
    w = w if w is not None else WorkloadSpec.from_topology(t, seq)
    unknown = {name for pair in w.segments for name in pair} - set(seq.instances)
    if unknown:
        raise WorkloadError(f"workload names unknown instances {sorted(unknown)}")
    partition = partition_instances(seq.instances, managers)
    times = tick_times(duration_s, tick_s)

    if distributed:
        from .distributed import run_distributed
        rows, metadata = run_distributed(seq, w, partition, times, tick_s, base_port)
    else:
        rows, metadata = _run_lockstep(seq, w, partition, times, tick_s)
    return ExperimentResult(rows, metadata, tick_s, duration_s, partition)


def build_manager(m: int, owned: Sequence[str], seq: SnapshotSequence, w: WorkloadSpec,
                  tick_s: float, n_managers: int, control_port: int = DEFAULT_PORT):
    address = {name: instance_address(i) for i, name in enumerate(seq.instances)}
    backends = make_backends(owned, w, address)
    mgr = EmulationManager(m, owned, seq, backends, tick_s=tick_s, n_peers=n_managers - 1,
                           control_port=control_port)
    return mgr, backends


def _run_lockstep(seq, w, partition, times, tick_s):
    n = len(partition)
    built = [build_manager(m, owned, seq, w, tick_s, n) for m, owned in enumerate(partition)]
    rows: list[TickRow] = []
    metadata: list[tuple[float, int, int]] = []
    try:
        for now in times:
            for _, backends in built:
                for b in backends.values():
                    b.advance(now - tick_s, now)
            outgoing = [mgr.collect(now) for mgr, _ in built]
            for m, datagrams in enumerate(outgoing):
                for k, (peer, _) in enumerate(built):
                    if k != m:
                        for d in datagrams:
                            peer.receive(d)
            for mgr, _ in built:
                report = mgr.enforce(now)
                rows.extend(report.rows)
                metadata.append((now, mgr.manager_id, report.metadata_bytes))
    finally:
        for mgr, _ in built:
            mgr.tear_down()
    return rows, metadata
