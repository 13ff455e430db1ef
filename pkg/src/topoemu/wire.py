"""Binary metadata messages exchanged between emulation managers.

Layout, big-endian with no padding::

    sender_id    u16
    flow_count   u16
    flow_count x:
        used_bandwidth_bps  u32
        link_count          u8
        link_ids            u8 or u16 each (the id width)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

__all__ = [
    "DATAGRAM_LIMIT",
    "DEFAULT_PORT",
    "FlowUsage",
    "MetadataMessage",
    "WireError",
    "decode_metadata",
    "encode_metadata",
    "encoded_size",
    "split_datagrams",
]

DEFAULT_PORT = 7073
DATAGRAM_LIMIT = 1472  # 1500-byte MTU minus IPv4 and UDP headers

_HEADER = struct.Struct(">HH")
_FLOW = struct.Struct(">IB")
_ID_FORMAT = {1: "B", 2: "H"}


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class FlowUsage:
    used_bandwidth_bps: int
    link_ids: tuple[int, ...]


@dataclass(frozen=True)
class MetadataMessage:
    sender_id: int
    flows: tuple[FlowUsage, ...] = ()

    @property
    def flow_count(self) -> int:
        return len(self.flows)


def encoded_size(m: MetadataMessage, id_width: int) -> int:
    return _HEADER.size + sum(_FLOW.size + len(f.link_ids) * id_width for f in m.flows)


def encode_metadata(m: MetadataMessage, id_width: int) -> bytes:
    if id_width not in _ID_FORMAT:
        raise WireError(f"id width must be 1 or 2, got {id_width}")
    if not 0 <= m.sender_id < 2**16:
        raise WireError(f"sender id {m.sender_id} overflows 16 bits")
    if len(m.flows) >= 2**16:
        raise WireError("too many flows for one message")
    id_limit = 2 ** (8 * id_width)
    parts = [_HEADER.pack(m.sender_id, len(m.flows))]
    for f in m.flows:
        if not 0 <= f.used_bandwidth_bps < 2**32:
            raise WireError(f"bandwidth {f.used_bandwidth_bps} overflows 32 bits")
        if len(f.link_ids) >= 256:
            raise WireError("more than 255 links on one flow")
        if any(not 0 <= lid < id_limit for lid in f.link_ids):
            raise WireError(f"link id overflows {8 * id_width} bits")
        parts.append(_FLOW.pack(f.used_bandwidth_bps, len(f.link_ids)))
        parts.append(struct.pack(f">{len(f.link_ids)}{_ID_FORMAT[id_width]}", *f.link_ids))
    return b"".join(parts)


def decode_metadata(data: bytes, id_width: int) -> MetadataMessage:
    if id_width not in _ID_FORMAT:
        raise WireError(f"id width must be 1 or 2, got {id_width}")
    if len(data) < _HEADER.size:
        raise WireError("truncated header")
    sender, count = _HEADER.unpack_from(data, 0)
    offset = _HEADER.size
    flows = []
    for _ in range(count):
        if offset + _FLOW.size > len(data):
            raise WireError("truncated flow record")
        used, n_links = _FLOW.unpack_from(data, offset)
        offset += _FLOW.size
        end = offset + n_links * id_width
        if end > len(data):
            raise WireError("truncated link id list")
        ids = struct.unpack_from(f">{n_links}{_ID_FORMAT[id_width]}", data, offset)
        offset = end
        flows.append(FlowUsage(used, tuple(ids)))
    if offset != len(data):
        raise WireError(f"{len(data) - offset} trailing bytes")
    return MetadataMessage(sender, tuple(flows))


def split_datagrams(m: MetadataMessage, id_width: int, limit: int = DATAGRAM_LIMIT) -> list[bytes]:
    """Encode ``m`` as one or more datagrams of at most ``limit`` bytes.

    Splits happen at flow boundaries; every piece carries the sender id. A
    message without flows still yields one header-only datagram.
    """
    chunks: list[list[FlowUsage]] = [[]]
    size = _HEADER.size
    for f in m.flows:
        need = _FLOW.size + len(f.link_ids) * id_width
        if _HEADER.size + need > limit:
            raise WireError("a single flow record exceeds the datagram limit")
        if size + need > limit or len(chunks[-1]) == 2**16 - 1:
            chunks.append([])
            size = _HEADER.size
        chunks[-1].append(f)
        size += need
    return [encode_metadata(MetadataMessage(m.sender_id, tuple(c)), id_width) for c in chunks]
