"""Sparse counted-data file format: reader, writer, and group merge.

Layout (little-endian): magic "S4DC" | version u16 = 1 | scan_number u32
| scan_rows u32 | scan_cols u32 | frame_rows u32 | frame_cols u32
| background_threshold f64 | xray_threshold f64 | n_frames u32, then per
frame in ascending frame_number: frame_number u32 | sector_mask u8
| n_events u32 | event pixel indices u32[] (row-major, ascending).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPARSE_MAGIC = b"S4DC"
SPARSE_VERSION = 1
FULL_MASK = 0xF

_HEAD = struct.Struct("<HIIIIIddI")
_FRAME_HEAD = struct.Struct("<IBI")


class SparseFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SparseFrame:
    frame_number: int
    sector_mask: int
    events: np.ndarray  # ascending u32 row-major pixel indices

    def __eq__(self, other):
        if not isinstance(other, SparseFrame):
            return NotImplemented
        return (self.frame_number == other.frame_number
                and self.sector_mask == other.sector_mask
                and np.array_equal(self.events, other.events))


@dataclass
class SparseScan:
    scan_number: int
    scan_rows: int
    scan_cols: int
    frame_rows: int
    frame_cols: int
    background_threshold: float
    xray_threshold: float
    frames: list[SparseFrame] = field(default_factory=list)

    @property
    def n_events(self) -> int:
        return sum(len(f.events) for f in self.frames)


def write_sparse(path: str | Path, scan: SparseScan) -> Path:
    """Write a sparse scan file; frames are sorted by frame number."""
    path = Path(path)
    frames = sorted(scan.frames, key=lambda f: f.frame_number)
    seen = set()
    for f in frames:
        if f.frame_number in seen:
            raise SparseFormatError(f"duplicate frame {f.frame_number}")
        seen.add(f.frame_number)
    with open(path, "wb") as fh:
        fh.write(SPARSE_MAGIC)
        fh.write(_HEAD.pack(SPARSE_VERSION, scan.scan_number, scan.scan_rows,
                            scan.scan_cols, scan.frame_rows, scan.frame_cols,
                            scan.background_threshold, scan.xray_threshold,
                            len(frames)))
        npix = scan.frame_rows * scan.frame_cols
        for f in frames:
            events = np.asarray(f.events, dtype="<u4")
            if events.size and (np.any(np.diff(events.astype(np.int64)) <= 0)
                                or int(events[-1]) >= npix):
                raise SparseFormatError(
                    f"frame {f.frame_number}: events not strictly ascending "
                    f"in-range indices")
            fh.write(_FRAME_HEAD.pack(f.frame_number, f.sector_mask,
                                      len(events)))
            fh.write(events.tobytes())
    return path


def read_sparse(path: str | Path) -> SparseScan:
    raw = Path(path).read_bytes()
    if raw[:4] != SPARSE_MAGIC:
        raise SparseFormatError(f"bad magic {raw[:4]!r}")
    (version, scan_number, scan_rows, scan_cols, frame_rows, frame_cols,
     background, xray, n_frames) = _HEAD.unpack_from(raw, 4)
    if version != SPARSE_VERSION:
        raise SparseFormatError(f"unsupported version {version}")
    scan = SparseScan(scan_number, scan_rows, scan_cols, frame_rows,
                      frame_cols, background, xray)
    off = 4 + _HEAD.size
    for _ in range(n_frames):
        fnum, mask, n_events = _FRAME_HEAD.unpack_from(raw, off)
        off += _FRAME_HEAD.size
        events = np.frombuffer(raw, dtype="<u4", count=n_events, offset=off)
        off += 4 * n_events
        scan.frames.append(SparseFrame(fnum, mask, events.copy()))
    if off != len(raw):
        raise SparseFormatError("trailing bytes after last frame")
    return scan


def merge_sparse(paths: list[str | Path], out_path: str | Path) -> Path:
    """Merge per-NodeGroup outputs into one full-coverage scan file.

    Refuses to merge if the inputs disagree on metadata or do not
    partition frames 0..n_frames-1 exactly once.
    """
    if not paths:
        raise SparseFormatError("nothing to merge")
    scans = [read_sparse(p) for p in paths]
    first = scans[0]
    meta = (first.scan_number, first.scan_rows, first.scan_cols,
            first.frame_rows, first.frame_cols, first.background_threshold,
            first.xray_threshold)
    for s in scans[1:]:
        if (s.scan_number, s.scan_rows, s.scan_cols, s.frame_rows,
                s.frame_cols, s.background_threshold,
                s.xray_threshold) != meta:
            raise SparseFormatError("group outputs disagree on scan metadata")
    frames: list[SparseFrame] = []
    for s in scans:
        frames.extend(s.frames)
    numbers = sorted(f.frame_number for f in frames)
    expected = list(range(first.scan_rows * first.scan_cols))
    if numbers != expected:
        raise SparseFormatError(
            f"merged frames do not cover the scan exactly once "
            f"({len(numbers)} frames, expected {len(expected)})")
    merged = SparseScan(*meta, frames=frames)
    return write_sparse(out_path, merged)
