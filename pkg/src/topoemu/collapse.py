"""Topology collapsing: shortest paths between instances and end-to-end properties.

Paths minimize total latency. Ties go to the path with fewer hops, then to
the lexicographically smallest sequence of link ids. Services are terminal:
a path may start or end at a service but only bridges are transit nodes.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from numba import njit

from .topology import Link, NetworkState, Topology

__all__ = [
    "UNLIMITED_BPS",
    "CollapsedPath",
    "CollapsedTopology",
    "PathProperties",
    "collapse_topology",
    "compose_path",
    "shortest_paths",
]

UNLIMITED_BPS = int(np.iinfo(np.int64).max)


class PathProperties(NamedTuple):
    latency_ms: float
    jitter_ms: float
    loss: float
    max_bandwidth_bps: int


@dataclass(frozen=True)
class CollapsedPath:
    src: str
    dst: str
    latency_ms: float
    jitter_ms: float
    loss: float
    max_bandwidth_bps: int
    link_ids: tuple[int, ...]
    rtt_ms: float


def compose_path(links: Sequence[Link]) -> PathProperties:
    """End-to-end properties of an ordered list of links.

    Latencies add, jitters add in quadrature, delivery probabilities multiply
    and the bandwidth is that of the narrowest link. The empty path has zero
    latency, jitter and loss and unlimited bandwidth.
    """
    latency = 0.0
    jitter_sq = 0.0
    delivered = 1.0
    bandwidth = UNLIMITED_BPS
    for link in links:
        latency = latency + link.latency_ms
        jitter_sq = jitter_sq + link.jitter_ms * link.jitter_ms
        delivered = delivered * (1.0 - link.loss)
        bandwidth = min(bandwidth, link.bandwidth_bps)
    return PathProperties(latency, math.sqrt(jitter_sq), 1.0 - delivered, int(bandwidth))


# --------------------------------------------------------------------------
# single-source search kernel


@njit(cache=True)
def _fill_seq(buf, length, u, last, src, plink, l_orig):
    buf[length - 1] = last
    x = u
    i = length - 2
    while x != src:
        e = plink[x]
        buf[i] = e
        x = l_orig[e]
        i -= 1


@njit(cache=True)
def _lex_less(u, e, p, f, length, src, plink, l_orig, buf_a, buf_b):
    # seq(u)+[e] < seq(p)+[f], both of the same length
    _fill_seq(buf_a, length, u, e, src, plink, l_orig)
    _fill_seq(buf_b, length, p, f, src, plink, l_orig)
    for i in range(length):
        if buf_a[i] != buf_b[i]:
            return buf_a[i] < buf_b[i]
    return False


@njit(cache=True)
def _collapse_kernel(sources, n, indptr, adj_link, l_orig, l_dest, l_lat, l_jit, l_loss, l_bw,
                     is_terminal, target_col, out_lat, out_hops, out_j2, out_lp, out_bw, out_plink,
                     cyc_lat, cyc_hops, cyc_link, cyc_j2, cyc_lp, cyc_bw):
    big = np.iinfo(np.int64).max
    buf_a = np.empty(n + 2, np.int64)
    buf_b = np.empty(n + 2, np.int64)
    for si in range(sources.shape[0]):
        src = sources[si]
        lat = np.full(n, np.inf)
        hops = np.full(n, -1, np.int64)
        plink = np.full(n, -1, np.int64)
        done = np.zeros(n, np.bool_)
        order = np.empty(n, np.int64)
        count = 0
        lat[src] = 0.0
        hops[src] = 0
        c_lat = np.inf
        c_hops = -1
        c_link = -1
        heap = [(0.0, np.int64(0), np.int64(src))]
        while len(heap) > 0:
            d, h, u = heapq.heappop(heap)
            if done[u] or d != lat[u] or h != hops[u]:
                continue
            done[u] = True
            order[count] = u
            count += 1
            if u != src and is_terminal[u]:
                continue
            for k in range(indptr[u], indptr[u + 1]):
                e = adj_link[k]
                v = l_dest[e]
                nd = d + l_lat[e]
                nh = h + 1
                if v == src:
                    take = False
                    if nd < c_lat:
                        take = True
                    elif nd == c_lat:
                        if nh < c_hops:
                            take = True
                        elif nh == c_hops and _lex_less(u, e, l_orig[c_link], c_link, nh, src,
                                                        plink, l_orig, buf_a, buf_b):
                            take = True
                    if take:
                        c_lat = nd
                        c_hops = nh
                        c_link = e
                    continue
                if done[v]:
                    continue
                better = False
                if nd < lat[v]:
                    better = True
                elif nd == lat[v]:
                    if nh < hops[v]:
                        better = True
                    elif nh == hops[v] and _lex_less(u, e, l_orig[plink[v]], plink[v], nh, src,
                                                     plink, l_orig, buf_a, buf_b):
                        better = True
                if better:
                    lat[v] = nd
                    hops[v] = nh
                    plink[v] = e
                    heapq.heappush(heap, (nd, nh, v))

        j2 = np.zeros(n)
        lp = np.ones(n)
        bw = np.full(n, big, np.int64)
        for idx in range(1, count):
            v = order[idx]
            e = plink[v]
            p = l_orig[e]
            j2[v] = j2[p] + l_jit[e] * l_jit[e]
            lp[v] = lp[p] * (1.0 - l_loss[e])
            bw[v] = min(bw[p], l_bw[e])
        for v in range(n):
            t = target_col[v]
            if t >= 0:
                out_lat[si, t] = lat[v]
                out_hops[si, t] = hops[v]
                out_j2[si, t] = j2[v]
                out_lp[si, t] = lp[v]
                out_bw[si, t] = bw[v]
            out_plink[si, v] = plink[v]
        cyc_link[si] = c_link
        if c_link >= 0:
            p = l_orig[c_link]
            cyc_lat[si] = c_lat
            cyc_hops[si] = c_hops
            cyc_j2[si] = j2[p] + l_jit[c_link] * l_jit[c_link]
            cyc_lp[si] = lp[p] * (1.0 - l_loss[c_link])
            cyc_bw[si] = min(bw[p], l_bw[c_link])
        else:
            cyc_lat[si] = np.inf
            cyc_hops[si] = -1


class _Graph:
    """Array form of a network state: nodes are services then bridges."""

    def __init__(self, state: NetworkState | Topology):
        self.services = [s.name for s in state.services]
        self.nodes = self.services + [b.name for b in state.bridges]
        self.node_index = {name: i for i, name in enumerate(self.nodes)}
        links = [l for l in state.links if l.orig in self.node_index and l.dest in self.node_index]
        links.sort(key=lambda l: l.id)
        self.links = links
        n = len(self.nodes)
        self.l_id = np.array([l.id for l in links], np.int64)
        self.l_orig = np.array([self.node_index[l.orig] for l in links], np.int64)
        self.l_dest = np.array([self.node_index[l.dest] for l in links], np.int64)
        self.l_lat = np.array([l.latency_ms for l in links], np.float64)
        self.l_jit = np.array([l.jitter_ms for l in links], np.float64)
        self.l_loss = np.array([l.loss for l in links], np.float64)
        self.l_bw = np.array([l.bandwidth_bps for l in links], np.int64)
        order = np.argsort(self.l_orig, kind="stable")
        self.adj_link = order.astype(np.int64)
        self.indptr = np.zeros(n + 1, np.int64)
        np.add.at(self.indptr, self.l_orig + 1, 1)
        self.indptr = np.cumsum(self.indptr)
        self.is_terminal = np.zeros(n, np.bool_)
        self.is_terminal[: len(self.services)] = True
        self.target_col = np.full(n, -1, np.int64)
        self.target_col[: len(self.services)] = np.arange(len(self.services))

    def run(self, sources: np.ndarray) -> dict[str, np.ndarray]:
        s, t, n = len(sources), len(self.services), len(self.nodes)
        out = {
            "lat": np.full((s, t), np.inf),
            "hops": np.full((s, t), -1, np.int64),
            "j2": np.zeros((s, t)),
            "lp": np.ones((s, t)),
            "bw": np.full((s, t), UNLIMITED_BPS, np.int64),
            "plink": np.full((s, n), -1, np.int32 if n < 2**31 else np.int64),
            "cyc_lat": np.full(s, np.inf),
            "cyc_hops": np.full(s, -1, np.int64),
            "cyc_link": np.full(s, -1, np.int64),
            "cyc_j2": np.zeros(s),
            "cyc_lp": np.ones(s),
            "cyc_bw": np.full(s, UNLIMITED_BPS, np.int64),
        }
        if s and n:
            _collapse_kernel(
                np.asarray(sources, np.int64), n, self.indptr, self.adj_link, self.l_orig, self.l_dest,
                self.l_lat, self.l_jit, self.l_loss, self.l_bw, self.is_terminal, self.target_col,
                out["lat"], out["hops"], out["j2"], out["lp"], out["bw"], out["plink"],
                out["cyc_lat"], out["cyc_hops"], out["cyc_link"], out["cyc_j2"], out["cyc_lp"],
                out["cyc_bw"])
        return out


def _walk(plink_row: np.ndarray, l_orig: np.ndarray, src_node: int, node: int) -> list[int]:
    seq = []
    while node != src_node:
        e = int(plink_row[node])
        seq.append(e)
        node = int(l_orig[e])
    seq.reverse()
    return seq


class CollapsedTopology:
    """Every reachable ordered pair of instances with its collapsed path.

    Results are held as service-by-service arrays; replicas of one service
    share the arrays of their service. Instance pairs are produced on demand.
    """

    def __init__(self, state: NetworkState | Topology):
        self.state = state
        self._g = _Graph(state)
        self.links = {l.id: l for l in self._g.links}
        self.instances: tuple[str, ...] = tuple(state.instances)
        self.instance_index = {name: i for i, name in enumerate(self.instances)}
        svc_of = state.instance_service
        self._svc = np.array([self._g.node_index[svc_of[name]] for name in self.instances], np.int64)
        self._arr = self._g.run(np.arange(len(self._g.services), dtype=np.int64))

    # -- pair lookup -------------------------------------------------------

    def _locate(self, src: str, dst: str) -> tuple[int, int, bool] | None:
        i, j = self.instance_index[src], self.instance_index[dst]
        if i == j:
            return None
        a, b = int(self._svc[i]), int(self._svc[j])
        return a, b, a == b

    def _reachable(self, a: int, b: int, cyc: bool) -> bool:
        return self._arr["cyc_link"][a] >= 0 if cyc else bool(np.isfinite(self._arr["lat"][a, b]))

    def latency_ms(self, src: str, dst: str) -> float:
        loc = self._locate(src, dst)
        if loc is None:
            return 0.0
        a, b, cyc = loc
        return float(self._arr["cyc_lat"][a] if cyc else self._arr["lat"][a, b])

    def rtt_ms(self, src: str, dst: str) -> float:
        return self.latency_ms(src, dst) + self.latency_ms(dst, src)

    def link_ids(self, src: str, dst: str) -> tuple[int, ...]:
        loc = self._locate(src, dst)
        if loc is None:
            return ()
        a, b, cyc = loc
        if not self._reachable(a, b, cyc):
            raise KeyError((src, dst))
        plink = self._arr["plink"][a]
        if cyc:
            last = int(self._arr["cyc_link"][a])
            seq = _walk(plink, self._g.l_orig, a, int(self._g.l_orig[last])) + [last]
        else:
            seq = _walk(plink, self._g.l_orig, a, b)
        return tuple(int(self._g.l_id[e]) for e in seq)

    def path(self, src: str, dst: str) -> CollapsedPath | None:
        """The collapsed path ``src -> dst`` or ``None`` when unreachable."""
        loc = self._locate(src, dst)
        if loc is None:
            return CollapsedPath(src, dst, 0.0, 0.0, 0.0, UNLIMITED_BPS, (), 0.0)
        a, b, cyc = loc
        if not self._reachable(a, b, cyc):
            return None
        arr = self._arr
        if cyc:
            lat, j2, lp, bw = arr["cyc_lat"][a], arr["cyc_j2"][a], arr["cyc_lp"][a], arr["cyc_bw"][a]
        else:
            lat, j2, lp, bw = arr["lat"][a, b], arr["j2"][a, b], arr["lp"][a, b], arr["bw"][a, b]
        return CollapsedPath(src, dst, float(lat), math.sqrt(float(j2)), 1.0 - float(lp), int(bw),
                             self.link_ids(src, dst), float(lat) + self.latency_ms(dst, src))

    def __contains__(self, pair: tuple[str, str]) -> bool:
        loc = self._locate(*pair)
        return loc is not None and self._reachable(*loc)

    def pairs(self) -> Iterator[CollapsedPath]:
        """Collapsed paths of all reachable ordered pairs, in instance order."""
        for src in self.instances:
            for dst in self.instances:
                if src != dst and (src, dst) in self:
                    yield self.path(src, dst)

    def __len__(self) -> int:
        return int(self.reachable_matrix().sum())

    def __iter__(self) -> Iterator[CollapsedPath]:
        return self.pairs()

    # -- whole-topology views ---------------------------------------------

    def matrix(self, prop: str) -> np.ndarray:
        """Instance-by-instance array of one path property.

        ``prop`` is one of ``latency_ms``, ``jitter_ms``, ``loss``,
        ``max_bandwidth_bps``, ``rtt_ms`` or ``hops``. Unreachable pairs hold
        ``inf`` (``-1`` for hops, 0 for bandwidth) and the diagonal is the
        empty path.
        """
        if prop == "rtt_ms":
            lat = self.matrix("latency_ms")
            return lat + lat.T
        arr = self._arr
        key, cyc_key = {
            "latency_ms": ("lat", "cyc_lat"),
            "jitter_ms": ("j2", "cyc_j2"),
            "loss": ("lp", "cyc_lp"),
            "max_bandwidth_bps": ("bw", "cyc_bw"),
            "hops": ("hops", "cyc_hops"),
        }[prop]
        svc = self._svc
        out = arr[key][svc[:, None], svc[None, :]].copy()
        same = svc[:, None] == svc[None, :]
        out[same] = np.broadcast_to(arr[cyc_key][svc][:, None], out.shape)[same]
        reach = self.reachable_matrix()
        if prop == "jitter_ms":
            out = np.sqrt(out)
        elif prop == "loss":
            out = 1.0 - out
        np.fill_diagonal(out, {"lat": 0.0, "j2": 0.0, "lp": 0.0, "bw": UNLIMITED_BPS, "hops": 0}[key])
        if out.dtype.kind == "f":
            out[~reach & ~np.eye(len(svc), dtype=bool)] = np.inf
        elif prop == "hops":
            out[~reach & ~np.eye(len(svc), dtype=bool)] = -1
        else:
            out[~reach & ~np.eye(len(svc), dtype=bool)] = 0
        return out

    def reachable_matrix(self) -> np.ndarray:
        svc = self._svc
        reach = np.isfinite(self._arr["lat"][svc[:, None], svc[None, :]])
        same = svc[:, None] == svc[None, :]
        reach[same] = np.broadcast_to((self._arr["cyc_link"] >= 0)[svc][:, None], reach.shape)[same]
        np.fill_diagonal(reach, False)
        return reach

    @cached_property
    def _reverse_index(self) -> dict[int, list[tuple[str, str]]]:
        index: dict[int, list[tuple[str, str]]] = {lid: [] for lid in self.links}
        for p in self.pairs():
            for lid in p.link_ids:
                index[lid].append((p.src, p.dst))
        return index

    def paths_through(self, link_id: int) -> list[tuple[str, str]]:
        """Ordered pairs whose collapsed path crosses ``link_id``."""
        return list(self._reverse_index.get(link_id, ()))


def collapse_topology(t: NetworkState | Topology) -> CollapsedTopology:
    return CollapsedTopology(t)


def shortest_paths(t: NetworkState | Topology, src: str) -> dict[str, list[int]]:
    """Link-id path from instance ``src`` to every reachable instance."""
    g = _Graph(t)
    svc_of = t.instance_service
    a = g.node_index[svc_of[src]]
    arr = g.run(np.array([a], np.int64))
    out: dict[str, list[int]] = {}
    for dst in t.instances:
        if dst == src:
            out[dst] = []
            continue
        b = g.node_index[svc_of[dst]]
        if a == b:
            last = int(arr["cyc_link"][0])
            if last < 0:
                continue
            seq = _walk(arr["plink"][0], g.l_orig, a, int(g.l_orig[last])) + [last]
        else:
            if not np.isfinite(arr["lat"][0, b]):
                continue
            seq = _walk(arr["plink"][0], g.l_orig, a, b)
        out[dst] = [int(g.l_id[e]) for e in seq]
    return out
