"""Detector geometry and the bit-exact wire encoding of info and data messages.

All multi-byte integers are little-endian. A data message is two frames:
a fixed-layout header frame and a raw pixel payload frame. The transport
(see transport.py) delivers both frames atomically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DATA_MAGIC = 0x53344443
INFO_MAGIC = 0x53344449
WIRE_VERSION = 1

N_SECTORS = 4
PIXEL_DEPTH = 2  # uint16

# magic u32 | version u16 | scan u32 | frame u32 | sector u16 | sequence u32
# | flags u16 | payload_len u32
_HEADER = struct.Struct("<IHIIHIHI")
_INFO_HEAD = struct.Struct("<IHIH")

FLAG_SYNTHETIC = 0x1


class ProtocolError(ValueError):
    """Malformed or inconsistent wire data."""


class EncodingError(ValueError):
    """Message violates an invariant and cannot be encoded."""


@dataclass(frozen=True)
class DetectorGeometry:
    """Frame shape and its partition into horizontal sector bands."""

    frame_rows: int = 576
    frame_cols: int = 576

    def __post_init__(self):
        if self.frame_rows % N_SECTORS != 0:
            raise ValueError(
                f"frame_rows {self.frame_rows} not divisible by {N_SECTORS}"
            )
        if self.frame_rows < N_SECTORS or self.frame_cols < 1:
            raise ValueError("degenerate geometry")

    @property
    def n_sectors(self) -> int:
        return N_SECTORS

    @property
    def sector_rows(self) -> int:
        return self.frame_rows // N_SECTORS

    @property
    def sector_pixels(self) -> int:
        return self.sector_rows * self.frame_cols

    @property
    def frame_pixels(self) -> int:
        return self.frame_rows * self.frame_cols

    @property
    def sector_bytes(self) -> int:
        return self.sector_pixels * PIXEL_DEPTH

    @property
    def frame_bytes(self) -> int:
        return self.frame_pixels * PIXEL_DEPTH


@dataclass(frozen=True)
class SectorHeader:
    scan_number: int
    frame_number: int
    sector_index: int
    sequence: int = 0
    flags: int = 0

    def validate(self, geometry: DetectorGeometry | None = None,
                 n_frames: int | None = None) -> None:
        if not 0 <= self.sector_index < N_SECTORS:
            raise EncodingError(f"sector_index {self.sector_index} out of range")
        if self.frame_number < 0:
            raise EncodingError("negative frame_number")
        if n_frames is not None and self.frame_number >= n_frames:
            raise EncodingError(
                f"frame_number {self.frame_number} beyond scan of {n_frames}"
            )


@dataclass(frozen=True)
class SectorMessage:
    header: SectorHeader
    payload: np.ndarray  # sector_rows x frame_cols uint16

    def __eq__(self, other):
        if not isinstance(other, SectorMessage):
            return NotImplemented
        return self.header == other.header and np.array_equal(
            self.payload, other.payload
        )


@dataclass(frozen=True)
class InfoMap:
    """Expected per-NodeGroup message counts, announced ahead of the data."""

    scan_number: int
    entries: dict[str, int] = field(default_factory=dict)


def encode_sector_message(msg: SectorMessage,
                          geometry: DetectorGeometry) -> list[bytes]:
    """Encode a sector message into its (header, payload) frame pair."""
    msg.header.validate(geometry)
    payload = np.ascontiguousarray(msg.payload, dtype="<u2")
    if payload.shape != (geometry.sector_rows, geometry.frame_cols):
        raise EncodingError(
            f"payload shape {payload.shape} does not match geometry "
            f"({geometry.sector_rows}, {geometry.frame_cols})"
        )
    raw = payload.tobytes()
    return [encode_header_frame(msg.header, len(raw)), raw]


def encode_header_frame(header: SectorHeader, payload_len: int) -> bytes:
    """Encode just the header frame for an already serialized payload."""
    return _HEADER.pack(DATA_MAGIC, WIRE_VERSION, header.scan_number,
                        header.frame_number, header.sector_index,
                        header.sequence, header.flags, payload_len)


def decode_sector_header(frame: bytes) -> tuple[SectorHeader, int]:
    """Decode just the header frame; returns (header, payload_len)."""
    if len(frame) != _HEADER.size:
        raise ProtocolError(f"header frame length {len(frame)} != {_HEADER.size}")
    magic, version, scan, fnum, sector, seq, flags, plen = _HEADER.unpack(frame)
    if magic != DATA_MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08x}")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported version {version}")
    return SectorHeader(scan, fnum, sector, seq, flags), plen


def peek_frame_number(header_frame: bytes) -> int:
    """Fast path for the aggregator: frame_number without full decode."""
    return struct.unpack_from("<I", header_frame, 10)[0]


def peek_scan_number(header_frame: bytes) -> int:
    return struct.unpack_from("<I", header_frame, 6)[0]


def decode_sector_message(frames: list[bytes],
                          geometry: DetectorGeometry) -> SectorMessage:
    if len(frames) != 2:
        raise ProtocolError(f"expected 2 frames, got {len(frames)}")
    header, plen = decode_sector_header(frames[0])
    if len(frames[1]) < plen:
        raise ProtocolError(
            f"truncated payload: {len(frames[1])} < declared {plen}"
        )
    if plen != geometry.sector_bytes:
        raise ProtocolError(
            f"payload_len {plen} does not match geometry {geometry.sector_bytes}"
        )
    payload = np.frombuffer(frames[1][:plen], dtype="<u2").reshape(
        geometry.sector_rows, geometry.frame_cols
    )
    return SectorMessage(header, payload)


def encode_info_map(info: InfoMap) -> bytes:
    if not info.entries:
        raise EncodingError("info map has no entries")
    parts = [_INFO_HEAD.pack(INFO_MAGIC, WIRE_VERSION, info.scan_number,
                             len(info.entries))]
    seen = set()
    for uid, count in info.entries.items():
        raw = uid.encode("utf-8")
        if len(raw) > 64:
            raise EncodingError(f"uid longer than 64 bytes: {uid!r}")
        if raw in seen:
            raise EncodingError(f"duplicate uid {uid!r}")
        seen.add(raw)
        if count < 0:
            raise EncodingError(f"negative count for {uid!r}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", count))
    return b"".join(parts)


def decode_info_map(frame: bytes) -> InfoMap:
    if len(frame) < _INFO_HEAD.size:
        raise ProtocolError("info frame too short")
    magic, version, scan, n = _INFO_HEAD.unpack_from(frame, 0)
    if magic != INFO_MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08x}")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported version {version}")
    entries: dict[str, int] = {}
    off = _INFO_HEAD.size
    for _ in range(n):
        (ulen,) = struct.unpack_from("<H", frame, off)
        off += 2
        uid = frame[off:off + ulen].decode("utf-8")
        off += ulen
        (count,) = struct.unpack_from("<Q", frame, off)
        off += 8
        if uid in entries:
            raise ProtocolError(f"duplicate uid {uid!r}")
        entries[uid] = count
    return InfoMap(scan, entries)


def is_info_frame(frame: bytes) -> bool:
    return len(frame) >= 4 and struct.unpack_from("<I", frame)[0] == INFO_MAGIC


def is_data_header(frame: bytes) -> bool:
    return len(frame) >= 4 and struct.unpack_from("<I", frame)[0] == DATA_MAGIC


def scan_raw_size(scan_rows: int, scan_cols: int,
                  geometry: DetectorGeometry | None = None) -> int:
    """Raw byte size of a full scan (all frames, all sectors)."""
    if scan_rows < 1 or scan_cols < 1:
        raise ValueError("scan dimensions must be >= 1")
    geometry = geometry or DetectorGeometry()
    return scan_rows * scan_cols * geometry.frame_bytes


def format_gb(n_bytes: int) -> str:
    """Decimal-GB display, truncated toward zero."""
    return f"{n_bytes // 10**9} GB"
