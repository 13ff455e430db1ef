"""Enforcement backends: the per-instance shaping interface and a simulated data plane."""
from __future__ import annotations

import functools
import ipaddress
from dataclasses import dataclass
from typing import Iterator, Mapping, Protocol, Sequence, runtime_checkable

__all__ = [
    "BackendError",
    "DestinationTable",
    "EnforcementBackend",
    "SimulatedBackend",
    "instance_address",
]


class BackendError(RuntimeError):
    pass


@runtime_checkable
class EnforcementBackend(Protocol):
    """Shapes outbound traffic of one instance per destination and counts bytes sent."""

    def init(self, control_port: int) -> None: ...

    def init_destination(self, dst: str, bandwidth_bps: int, latency_ms: float,
                         jitter_ms: float, loss: float) -> None: ...

    def change_bandwidth(self, dst: str, bandwidth_bps: int) -> None: ...

    def update_usage(self) -> None: ...

    def query_usage(self, dst: str) -> int: ...

    def tear_down(self) -> None: ...


def instance_address(index: int) -> str:
    """Deterministic IPv4 address of the instance at ``index`` (10.1.0.1 onwards)."""
    if not 0 <= index < 65534:
        raise ValueError("instance index out of address range")
    return str(ipaddress.IPv4Address("10.1.0.1") + index)


class DestinationTable:
    """Two-level table keyed by the last two octets of an IPv4 address.

    The first level is indexed by the third octet and the second by the
    fourth, each a 256-slot array, so lookups never hash or probe.
    """

    def __init__(self):
        self._levels: list[list | None] = [None] * 256
        self._entries: dict[tuple[int, int], object] = {}

    @staticmethod
    @functools.lru_cache(maxsize=1 << 16)
    def _octets(ip: str) -> tuple[int, int]:
        packed = ipaddress.IPv4Address(ip).packed
        return packed[2], packed[3]

    def __setitem__(self, ip: str, value) -> None:
        hi, lo = self._octets(ip)
        level = self._levels[hi]
        if level is None:
            level = self._levels[hi] = [None] * 256
        level[lo] = value
        self._entries[(hi, lo)] = value

    def __getitem__(self, ip: str):
        hi, lo = self._octets(ip)
        level = self._levels[hi]
        value = None if level is None else level[lo]
        if value is None:
            raise KeyError(ip)
        return value

    def get(self, ip: str, default=None):
        try:
            return self[ip]
        except KeyError:
            return default

    def __contains__(self, ip: str) -> bool:
        return self.get(ip) is not None

    def __len__(self) -> int:
        return len(self._entries)

    def values(self) -> Iterator:
        # insertion order, kept alongside the table so scans skip empty slots
        return iter(self._entries.values())

    def clear(self) -> None:
        self._levels = [None] * 256
        self._entries = {}


@dataclass
class _Destination:
    ip: str
    bandwidth_bps: int
    latency_ms: float
    jitter_ms: float
    loss: float
    sent_bits: float = 0.0
    usage_bytes: int = 0
    pending_bits: float = 0.0
    pending_s: float = 0.0
    offered_bps: float = 0.0


Segment = tuple[float, float, float]  # start_s, end_s, rate_bps


class SimulatedBackend:
    """An in-memory stand-in for kernel traffic shaping.

    ``demand`` maps destination addresses to offered-load segments. Calling
    :meth:`advance` moves simulated time forward: each destination delivers
    ``min(offered rate, configured bandwidth)`` and its byte counter grows
    accordingly. Latency, jitter and loss are stored as configured and not
    sampled per packet.
    """

    def __init__(self, demand: Mapping[str, Sequence[Segment]] | None = None):
        self.demand = {ip: tuple(sorted(segs)) for ip, segs in (demand or {}).items()}
        self.table = DestinationTable()
        self.control_port: int | None = None
        self.calls: list[tuple] = []

    def init(self, control_port: int) -> None:
        self.control_port = control_port
        self.calls.append(("init", control_port))

    def init_destination(self, dst: str, bandwidth_bps: int, latency_ms: float,
                         jitter_ms: float, loss: float) -> None:
        if bandwidth_bps < 0:
            raise BackendError(f"negative bandwidth for {dst}")
        old = self.table.get(dst)
        entry = _Destination(dst, int(bandwidth_bps), latency_ms, jitter_ms, loss)
        if old is not None:
            entry.sent_bits, entry.usage_bytes = old.sent_bits, old.usage_bytes
            entry.pending_bits, entry.pending_s = old.pending_bits, old.pending_s
            entry.offered_bps = old.offered_bps
        self.table[dst] = entry
        self.calls.append(("init_destination", dst, int(bandwidth_bps)))

    def _entry(self, dst: str) -> _Destination:
        try:
            return self.table[dst]
        except KeyError:
            raise BackendError(f"destination {dst} was not initialized") from None

    def change_bandwidth(self, dst: str, bandwidth_bps: int) -> None:
        if bandwidth_bps < 0:
            raise BackendError(f"negative bandwidth for {dst}")
        self._entry(dst).bandwidth_bps = int(bandwidth_bps)
        self.calls.append(("change_bandwidth", dst, int(bandwidth_bps)))

    def update_usage(self) -> None:
        for entry in self.table.values():
            entry.usage_bytes = int(entry.sent_bits // 8)
            entry.offered_bps = entry.pending_bits / entry.pending_s if entry.pending_s > 0 else 0.0
            entry.pending_bits = entry.pending_s = 0.0

    def query_usage(self, dst: str) -> int:
        return self._entry(dst).usage_bytes

    def query_offered(self, dst: str) -> float:
        """Mean rate the application offered to ``dst`` between the last two
        :meth:`update_usage` calls, in bits per second (``inf`` for unbounded
        senders). Not part of the backend interface; the engine uses it when
        present instead of inferring demand from usage.
        """
        return self._entry(dst).offered_bps

    def destination(self, dst: str) -> _Destination:
        return self._entry(dst)

    def tear_down(self) -> None:
        self.table.clear()
        self.calls.append(("tear_down",))

    def advance(self, t0: float, t1: float) -> None:
        """Deliver traffic for the simulated interval ``[t0, t1)``."""
        if t1 <= t0:
            return
        for entry in self.table.values():
            entry.pending_s += t1 - t0
        for ip, segments in self.demand.items():
            entry = self.table.get(ip)
            if entry is None:
                continue
            for start, end, rate in segments:
                overlap = min(end, t1) - max(start, t0)
                if overlap <= 0 or rate <= 0:
                    continue
                entry.pending_bits += rate * overlap
                entry.sent_bits += min(rate, entry.bandwidth_bps) * overlap
