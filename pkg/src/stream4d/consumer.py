"""NodeGroup service: frame reassembly, counting dispatch, sparse output.

Receives info totals and sector messages from the aggregator threads,
rebuilds full frames from their four sector bands, counts complete frames
as they appear, finalizes incomplete frames once all expected messages
arrived (or a timeout elapses), and writes one sparse file per scan.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import counting, statestore
from .counting import Thresholds
from .protocol import (DetectorGeometry, SectorMessage, decode_info_map,
                       decode_sector_message, is_data_header, is_info_frame)
from .sparse import FULL_MASK, SparseFrame, SparseScan, write_sparse
from .statestore import ClientKind, StateClient, Status
from .transport import PullServer

log = logging.getLogger(__name__)

DEFAULT_FINALIZE_TIMEOUT_MS = 5000
SCAN_META_TAG = b"SCAN"
_SCAN_META = struct.Struct("<IIIIIHH")


@dataclass(frozen=True)
class ScanMeta:
    """Scan-wide facts the aggregator announces on each data connection."""

    scan_number: int
    scan_rows: int
    scan_cols: int
    frame_rows: int
    frame_cols: int
    n_groups: int
    group_index: int

    @property
    def n_frames(self) -> int:
        return self.scan_rows * self.scan_cols

    @property
    def geometry(self) -> DetectorGeometry:
        return DetectorGeometry(self.frame_rows, self.frame_cols)

    def owned_frames(self) -> list[int]:
        return [f for f in range(self.n_frames)
                if f % self.n_groups == self.group_index]

    def encode(self) -> list[bytes]:
        return [SCAN_META_TAG, _SCAN_META.pack(
            self.scan_number, self.scan_rows, self.scan_cols,
            self.frame_rows, self.frame_cols, self.n_groups,
            self.group_index)]

    @classmethod
    def decode(cls, frame: bytes) -> "ScanMeta":
        return cls(*_SCAN_META.unpack(frame))


@dataclass
class FrameSlot:
    frame_number: int
    sectors: dict[int, np.ndarray] = field(default_factory=dict)
    first_seen: float = field(default_factory=time.monotonic)


@dataclass
class AssemblyState:
    geometry: DetectorGeometry
    expected_total: int | None = None
    received: int = 0
    duplicates: int = 0
    completed: int = 0
    incomplete: int = 0
    slots: dict[int, FrameSlot] = field(default_factory=dict)
    dispatched: set = field(default_factory=set)


def _build_frame(geometry: DetectorGeometry,
                 sectors: dict[int, np.ndarray]) -> tuple[np.ndarray, int]:
    """Place sector bands into a full frame; returns (frame, sector mask)."""
    frame = np.zeros((geometry.frame_rows, geometry.frame_cols),
                     dtype=np.uint16)
    mask = 0
    sr = geometry.sector_rows
    for idx, payload in sectors.items():
        frame[idx * sr:(idx + 1) * sr, :] = payload
        mask |= 1 << idx
    return frame, mask


def assemble(msg: SectorMessage, state: AssemblyState) -> np.ndarray | None:
    """Store one sector; returns the full frame when the 4th arrives."""
    state.received += 1
    fnum = msg.header.frame_number
    sector = msg.header.sector_index
    if fnum in state.dispatched:
        state.duplicates += 1
        return None
    slot = state.slots.get(fnum)
    if slot is None:
        slot = FrameSlot(fnum)
        state.slots[fnum] = slot
    if sector in slot.sectors:
        state.duplicates += 1
        return None
    slot.sectors[sector] = msg.payload
    if len(slot.sectors) < state.geometry.n_sectors:
        return None
    del state.slots[fnum]
    state.dispatched.add(fnum)
    state.completed += 1
    frame, _ = _build_frame(state.geometry, slot.sectors)
    return frame


def finalize(state: AssemblyState) -> list[tuple[int, int, np.ndarray]]:
    """Emit every open slot once as (frame_number, sector_mask, frame) with
    missing sectors zero-filled; drains the assembly state."""
    out = []
    for fnum in sorted(state.slots):
        slot = state.slots[fnum]
        frame, mask = _build_frame(state.geometry, slot.sectors)
        out.append((fnum, mask, frame))
        state.dispatched.add(fnum)
        state.incomplete += 1
    state.slots.clear()
    return out


@dataclass
class CountingParams:
    n_sigma: float = counting.DEFAULT_BACKGROUND_SIGMA
    sample_count: int = counting.DEFAULT_SAMPLE_COUNT
    connectivity: int = 8
    thresholds: Thresholds | None = None  # explicit, shared across groups
    dark: np.ndarray | None = None
    finalize_timeout_ms: int = DEFAULT_FINALIZE_TIMEOUT_MS


@dataclass
class ScanResult:
    uid: str
    scan_number: int
    path: str
    completed: int
    incomplete: int
    received: int
    expected_total: int
    duplicates: int
    n_events: int
    elapsed_seconds: float
    lossy: bool
    mode: str = "streamed"

    @property
    def deficit(self) -> int:
        return self.expected_total - self.received

    def to_dict(self) -> dict:
        return {
            "uid": self.uid, "scan_number": self.scan_number,
            "path": self.path, "completed": self.completed,
            "incomplete": self.incomplete, "received": self.received,
            "expected_total": self.expected_total,
            "duplicates": self.duplicates, "n_events": self.n_events,
            "elapsed_seconds": self.elapsed_seconds, "lossy": self.lossy,
            "deficit": self.deficit, "mode": self.mode,
        }


class _ScanAssembly:
    """Per-scan working state inside a NodeGroup."""

    def __init__(self, meta: ScanMeta, params: CountingParams,
                 pool: ThreadPoolExecutor):
        self.meta = meta
        self.params = params
        self.pool = pool
        self.state = AssemblyState(meta.geometry)
        self.expected_total = 0
        self.info_conns: set[int] = set()
        self.n_info = 0
        self.first_message = time.monotonic()
        self.last_message = time.monotonic()
        self.bytes_received = 0
        self.events: dict[int, np.ndarray] = {}
        self.buffered: dict[int, tuple[int, np.ndarray]] = {}
        self.masks: dict[int, int] = {}
        self.done = False

    @property
    def streaming_count(self) -> bool:
        return self.params.thresholds is not None

    def add_info(self, conn_id: int, total: int) -> bool:
        if conn_id in self.info_conns:
            log.warning("scan %d: duplicate info message ignored",
                        self.meta.scan_number)
            return False
        self.info_conns.add(conn_id)
        self.n_info += 1
        self.expected_total += total
        self.last_message = time.monotonic()
        return True

    def add_frame(self, fnum: int, mask: int, frame: np.ndarray) -> None:
        self.masks[fnum] = mask
        if self.streaming_count:
            # count in-flight: thresholds are known up front, so the frame
            # can be reduced and released immediately
            self.events[fnum] = counting.count_frame(
                frame, self.params.thresholds, self.params.dark,
                self.params.connectivity)
        else:
            self.buffered[fnum] = (mask, frame)

    def ready(self, n_info_expected: int) -> bool:
        return (self.n_info >= n_info_expected
                and self.state.received >= self.expected_total)

    def timed_out(self, now: float) -> bool:
        timeout = self.params.finalize_timeout_ms / 1000
        return now - self.last_message > timeout


class NodeGroupService:
    """One consumer node-group, end to end."""

    def __init__(self, uid: str,
                 state_address: tuple[str, int] | None,
                 out_dir: str | Path,
                 params: CountingParams | None = None,
                 host: str = "127.0.0.1", port: int = 0,
                 n_info_expected: int = 4,
                 workers: int | None = None,
                 orchestrator_url: str | None = None,
                 result_callback=None):
        self.uid = uid
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.params = params or CountingParams()
        self.n_info_expected = n_info_expected
        self.orchestrator_url = orchestrator_url
        self.result_callback = result_callback
        self.results: list[ScanResult] = []
        # assembly is serialized under one lock; messages are handled
        # directly in the pull server's reader threads
        self._serve_lock = threading.Lock()
        self.pull = PullServer(host, port, handler=self._on_message)
        self.address = self.pull.address
        self._pool = ThreadPoolExecutor(
            max_workers=workers or os.cpu_count() or 4,
            thread_name_prefix=f"count-{uid}")
        self._scans: dict[int, _ScanAssembly] = {}
        self._stopping = threading.Event()
        self._thread: threading.Thread | None = None
        self._state: StateClient | None = None
        if state_address is not None:
            self._state = StateClient(state_address, uid=uid,
                                      kind=ClientKind.nodegroup)
            self._state.sync()
            self._state.publish(Status.idle,
                                address=f"{self.address[0]}:{self.address[1]}")
            self._state.start_heartbeat()

    def start(self) -> None:
        self._thread = threading.Thread(target=self._timeout_loop, daemon=True,
                                        name=f"nodegroup-{self.uid}")
        self._thread.start()
        if self.orchestrator_url is not None:
            threading.Thread(target=self._metrics_loop, daemon=True,
                             name=f"metrics-{self.uid}").start()

    def _metrics_loop(self) -> None:
        import httpx
        while not self._stopping.wait(1.0):
            for scan in list(self._scans.values()):
                elapsed = time.monotonic() - scan.first_message
                payload = {
                    "scan_number": scan.meta.scan_number,
                    "bytes_received": scan.bytes_received,
                    "elapsed_ms": int(elapsed * 1000),
                    "throughput_bytes_per_s":
                        scan.bytes_received / elapsed if elapsed > 0 else 0.0,
                }
                try:
                    httpx.post(f"{self.orchestrator_url}/metrics",
                               json=payload, timeout=2.0)
                except Exception:
                    pass

    def stop(self, timeout: float = 30.0) -> None:
        """Drain: finish open scans, deregister, shut down."""
        self._stopping.set()
        if self._thread is not None:
            self._thread.join(timeout)
        self.pull.close()
        self._pool.shutdown(wait=True)
        if self._state is not None:
            self._state.deregister()
            self._state.close()

    def wait_for_results(self, count: int, timeout: float = 60.0) -> list[ScanResult]:
        end = time.monotonic() + timeout
        while len(self.results) < count:
            if time.monotonic() > end:
                raise TimeoutError(
                    f"{self.uid}: {len(self.results)}/{count} results after "
                    f"{timeout}s")
            time.sleep(0.01)
        return list(self.results)

    # -- internals -----------------------------------------------------------

    def _on_message(self, conn_id: int, frames: list[bytes]) -> None:
        with self._serve_lock:
            try:
                self._handle(conn_id, frames)
            except Exception:
                log.exception("%s: failed to handle message", self.uid)

    def _timeout_loop(self) -> None:
        while True:
            time.sleep(0.1)
            with self._serve_lock:
                self._check_timeouts()
            if self._stopping.is_set() and not self._scans:
                return

    def _handle(self, conn_id: int, frames: list[bytes]) -> None:
        head = frames[0]
        if head == SCAN_META_TAG:
            meta = ScanMeta.decode(frames[1])
            self._get_scan(meta.scan_number, meta)
        elif is_info_frame(head):
            info = decode_info_map(head)
            scan = self._get_scan(info.scan_number)
            if scan is None:
                log.warning("%s: info for unknown scan %d before metadata",
                            self.uid, info.scan_number)
                return
            scan.add_info(conn_id, info.entries.get(self.uid, 0))
            self._maybe_finalize(scan)
        elif is_data_header(head):
            from .protocol import peek_scan_number
            scan = self._get_scan(peek_scan_number(head))
            if scan is None:
                return
            msg = decode_sector_message(frames, scan.meta.geometry)
            scan.last_message = time.monotonic()
            scan.bytes_received += len(frames[0]) + len(frames[1])
            frame = assemble(msg, scan.state)
            if frame is not None:
                scan.add_frame(msg.header.frame_number, FULL_MASK, frame)
            self._maybe_finalize(scan)
        else:
            log.warning("%s: unrecognized message discarded", self.uid)

    def _get_scan(self, scan_number: int,
                  meta: ScanMeta | None = None) -> _ScanAssembly | None:
        scan = self._scans.get(scan_number)
        if scan is None and meta is not None:
            scan = _ScanAssembly(meta, self.params, self._pool)
            self._scans[scan_number] = scan
            if self._state is not None:
                self._state.publish(Status.streaming, scan_number=scan_number)
        return scan

    def _check_timeouts(self) -> None:
        now = time.monotonic()
        for scan in list(self._scans.values()):
            if scan.timed_out(now):
                log.warning("%s: scan %d finalized by timeout "
                            "(received %d / expected %d)", self.uid,
                            scan.meta.scan_number, scan.state.received,
                            scan.expected_total)
                self._finalize_scan(scan)

    def _maybe_finalize(self, scan: _ScanAssembly) -> None:
        if scan.ready(self.n_info_expected):
            self._finalize_scan(scan)

    def _finalize_scan(self, scan: _ScanAssembly) -> None:
        if scan.done:
            return
        scan.done = True
        if self._state is not None:
            self._state.publish(Status.draining,
                                scan_number=scan.meta.scan_number)

        # incomplete slots: zero-filled, then frames never seen at all
        for fnum, mask, frame in finalize(scan.state):
            scan.add_frame(fnum, mask, frame)
        geo = scan.meta.geometry
        for fnum in scan.meta.owned_frames():
            if fnum not in scan.masks:
                scan.state.incomplete += 1
                scan.add_frame(fnum, 0, np.zeros(
                    (geo.frame_rows, geo.frame_cols), dtype=np.uint16))

        thresholds = self.params.thresholds
        events: dict[int, np.ndarray] = {}
        if scan.streaming_count:
            events = scan.events
        else:
            frames = {fn: fr for fn, (_, fr) in scan.buffered.items()}
            sample_fns = counting.sample_frame_numbers(
                len(frames), self.params.sample_count)
            ordered = sorted(frames)
            samples = [frames[ordered[i]] for i in sample_fns] or \
                [np.zeros((geo.frame_rows, geo.frame_cols))]
            thresholds = counting.estimate_thresholds(
                samples, self.params.n_sigma, self.params.dark)
            futs = {fn: self._pool.submit(
                counting.count_frame, fr, thresholds, self.params.dark,
                self.params.connectivity) for fn, fr in frames.items()}
            events = {fn: fut.result() for fn, fut in futs.items()}

        sparse_frames = [SparseFrame(fn, scan.masks[fn], events[fn])
                         for fn in sorted(events)]
        out = SparseScan(
            scan_number=scan.meta.scan_number,
            scan_rows=scan.meta.scan_rows, scan_cols=scan.meta.scan_cols,
            frame_rows=scan.meta.frame_rows, frame_cols=scan.meta.frame_cols,
            background_threshold=thresholds.background if thresholds else 0.0,
            xray_threshold=thresholds.xray if thresholds else 0.0,
            frames=sparse_frames)
        path = self.out_dir / \
            f"scan{scan.meta.scan_number}_{self.uid}.s4dc"
        write_sparse(path, out)
        elapsed = time.monotonic() - scan.first_message

        result = ScanResult(
            uid=self.uid, scan_number=scan.meta.scan_number, path=str(path),
            completed=scan.state.completed, incomplete=scan.state.incomplete,
            received=scan.state.received, expected_total=scan.expected_total,
            duplicates=scan.state.duplicates, n_events=out.n_events,
            elapsed_seconds=elapsed,
            lossy=scan.state.received < scan.expected_total)
        if self.result_callback is not None:
            self.result_callback(result)
        self.results.append(result)
        del self._scans[scan.meta.scan_number]
        if self._state is not None:
            self._state.publish(Status.idle)
        if self.orchestrator_url is not None:
            self._report(result)

    def _report(self, result: ScanResult) -> None:
        import httpx
        try:
            httpx.post(f"{self.orchestrator_url}/scan-results",
                       json=result.to_dict(), timeout=5.0)
        except Exception as exc:
            log.warning("%s: result report failed: %s", self.uid, exc)
