"""RTT-aware min-max bandwidth sharing.

On a single link every active flow gets a share of the capacity inversely
proportional to its round-trip time. Share left unused by flows that cannot
take it (capped by demand or by another link) is handed to the remaining
flows in proportion to their original shares. Across a network the per-link
rule is iterated to a fixpoint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

__all__ = [
    "ConvergenceError",
    "DegenerateRTTError",
    "FlowRecord",
    "congestion_loss_rates",
    "maximize_allocation",
    "rtt_min_max_shares",
    "solve_allocations",
    "steady_state_allocations",
]

UNBOUNDED = math.inf
EPSILON = 1e-9
MAX_ITERATIONS = 10_000


class DegenerateRTTError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, last: list[float]):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True)
class FlowRecord:
    """Aggregate traffic from one instance to one destination instance."""

    src: str
    dst: str
    demand_bps: float = UNBOUNDED
    allocated_bps: float = 0.0
    rtt_ms: float = 0.0
    link_ids: tuple[int, ...] = ()


def rtt_min_max_shares(rtts: Sequence[float], capacity_bps: float) -> list[float]:
    """Capacity split among flows in inverse proportion to their RTTs.

    >>> [round(s / 1e6, 2) for s in rtt_min_max_shares([70, 60], 50e6)]
    [23.08, 26.92]
    """
    if any(r <= 0 for r in rtts):
        raise DegenerateRTTError("degenerate RTT: round-trip times must be positive")
    inv_sum = math.fsum(1.0 / r for r in rtts)
    return [capacity_bps / (r * inv_sum) for r in rtts]


def maximize_allocation(shares: Sequence[float], caps: Sequence[float],
                        capacity_bps: float) -> list[float]:
    """Redistribute share that capped flows cannot use.

    Each flow gets ``min(cap, scaled share)`` where the uncapped flows'
    shares are scaled by a common factor so that the link is filled. Flows
    whose scaled share exceeds their cap are pinned at the cap and the
    remainder is rescaled, until no further flow hits its cap.
    """
    if len(shares) != len(caps):
        raise ValueError("shares and caps differ in length")
    n = len(shares)
    pinned = [False] * n
    while True:
        rest = capacity_bps - math.fsum(caps[i] for i in range(n) if pinned[i])
        weight = math.fsum(shares[i] for i in range(n) if not pinned[i])
        newly = [i for i in range(n) if not pinned[i]
                 and (weight <= 0 or shares[i] * rest / weight > caps[i])]
        if not newly:
            break
        for i in newly:
            pinned[i] = True
    return [caps[i] if pinned[i] else shares[i] * rest / weight for i in range(n)]


def solve_allocations(flow_links: Sequence[Sequence[int]], rtts: Sequence[float],
                      demands: Sequence[float], capacities: Mapping[int, float], *,
                      epsilon: float = EPSILON, max_iterations: int = MAX_ITERATIONS) -> list[float]:
    """Network-wide steady state of the per-link sharing rule.

    Every link offers each of its flows the allocation that flow would get
    there if it were the only one unconstrained, given the other flows' caps
    from the remaining links of their paths. A flow's allocation is the
    smallest offer along its path, bounded by its demand. Offers are
    recomputed until no allocation moves by more than ``epsilon`` relative.

    Raises
    ------
    ConvergenceError
        When ``max_iterations`` rounds do not converge; carries the last
        iterate.
    """
    n = len(flow_links)
    active = [demands[f] > 0 for f in range(n)]
    on_link: dict[int, list[int]] = {}
    for f in range(n):
        if active[f]:
            for lid in flow_links[f]:
                on_link.setdefault(lid, []).append(f)
    link_shares = {lid: rtt_min_max_shares([rtts[f] for f in fs], capacities[lid])
                   for lid, fs in on_link.items()}
    offers: dict[tuple[int, int], float] = {(lid, f): UNBOUNDED for lid, fs in on_link.items() for f in fs}

    def allocation(f: int) -> float:
        if not active[f]:
            return 0.0
        return min([demands[f]] + [offers[(lid, f)] for lid in flow_links[f]])

    x = [allocation(f) for f in range(n)]
    for _ in range(max_iterations):
        fresh: dict[tuple[int, int], float] = {}
        for lid, fs in on_link.items():
            caps = [min([demands[g]] + [offers[(other, g)] for other in flow_links[g] if other != lid])
                    for g in fs]
            for k, f in enumerate(fs):
                own = caps[k]
                caps[k] = UNBOUNDED
                fresh[(lid, f)] = maximize_allocation(link_shares[lid], caps, capacities[lid])[k]
                caps[k] = own
        offers = fresh
        nxt = [allocation(f) for f in range(n)]
        moved = max((abs(a - b) / max(1.0, abs(a)) for a, b in zip(nxt, x)
                     if not (math.isinf(a) and math.isinf(b))), default=0.0)
        x = nxt
        if moved <= epsilon:
            return _project(x, flow_links, on_link, capacities)
    raise ConvergenceError(f"no fixpoint after {max_iterations} iterations", x)


def _project(x: list[float], flow_links, on_link, capacities) -> list[float]:
    # trims the residual of the iteration so no link exceeds its capacity
    x = list(x)
    for lid, fs in on_link.items():
        total = math.fsum(x[f] for f in fs)
        if total > capacities[lid]:
            scale = capacities[lid] / total
            for f in fs:
                x[f] *= scale
    return x


def steady_state_allocations(ct, flows: Sequence[FlowRecord]) -> list[FlowRecord]:
    """Fill in ``allocated_bps`` for flows over a collapsed topology.

    ``ct`` supplies link capacities through its ``links`` mapping; each flow
    must carry its path ``link_ids`` and ``rtt_ms``.
    """
    capacities = {lid: float(link.bandwidth_bps) for lid, link in ct.links.items()}
    alloc = solve_allocations([f.link_ids for f in flows], [f.rtt_ms for f in flows],
                              [f.demand_bps for f in flows], capacities)
    return [replace(f, allocated_bps=a) for f, a in zip(flows, alloc)]


def congestion_loss_rates(demands: Sequence[float], allocations: Sequence[float],
                          capacity_bps: float) -> list[float]:
    """Per-flow drop fraction on an oversubscribed link.

    Nothing is dropped while total demand fits the link. Otherwise each flow
    loses the part of its demand above its allocation. Unbounded demands are
    elastic senders that back off to their allocation and see no drops.
    """
    finite = [d for d in demands if not math.isinf(d)]
    if len(finite) == len(demands) and math.fsum(finite) <= capacity_bps:
        return [0.0] * len(demands)
    return [0.0 if math.isinf(d) or d <= 0 else max(0.0, 1.0 - a / d)
            for d, a in zip(demands, allocations)]
