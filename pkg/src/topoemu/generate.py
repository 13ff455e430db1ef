"""Scale-free test topologies grown by preferential attachment."""
from __future__ import annotations

import numpy as np

from .topology import Bridge, LinkSpec, ServiceSpec, Topology

__all__ = ["gen_scalefree"]


def gen_scalefree(n_elements: int, seed: int = 0, *, m: int = 2, max_latency_ms: int = 10,
                  bandwidth_bps: int = 10**9) -> Topology:
    """A connected topology of ``n_elements`` services and bridges.

    Two thirds of the elements (rounded down) are services, the rest
    bridges. Bridges form a backbone where each newcomer links to ``m``
    distinct existing bridges picked with probability proportional to their
    degree; every service then hangs off one bridge chosen the same way.
    Link latencies are uniform integers in ``[1, max_latency_ms]``.

    >>> t = gen_scalefree(1000, seed=1)
    >>> len(t.services), len(t.bridges)
    (666, 334)
    """
    if n_elements < 3:
        raise ValueError("a scale-free topology needs at least 3 elements")
    rng = np.random.default_rng(seed)
    n_services = 2 * n_elements // 3
    n_bridges = n_elements - n_services
    width = len(str(n_elements))
    services = tuple(ServiceSpec(f"n{i:0{width}d}", "app") for i in range(n_services))
    bridges = tuple(Bridge(f"b{i:0{width}d}") for i in range(n_bridges))

    edges: list[tuple[int, int]] = []  # bridge index pairs
    degree = np.zeros(n_bridges, dtype=np.int64)
    for new in range(1, n_bridges):
        k = min(m, new)
        weights = degree[:new] + 1.0
        targets = rng.choice(new, size=k, replace=False, p=weights / weights.sum())
        for old in sorted(int(x) for x in targets):
            edges.append((old, new))
            degree[old] += 1
            degree[new] += 1

    attach = []
    for _ in range(n_services):
        weights = degree + 1.0
        b = int(rng.choice(n_bridges, p=weights / weights.sum()))
        attach.append(b)
        degree[b] += 1

    latencies = rng.integers(1, max_latency_ms + 1, size=len(edges) + n_services)
    links = []
    for (a, b), lat in zip(edges, latencies):
        links.append(LinkSpec(len(links), bridges[a].name, bridges[b].name, float(lat),
                              bandwidth_bps, bandwidth_bps))
    for i, (b, lat) in enumerate(zip(attach, latencies[len(edges):])):
        links.append(LinkSpec(len(links), services[i].name, bridges[b].name, float(lat),
                              bandwidth_bps, bandwidth_bps))
    return Topology(services, bridges, tuple(links))
