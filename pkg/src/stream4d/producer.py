"""Synthetic sector producer: one service per detector sector.

Generates deterministic sector streams for a scan, announces exact
per-NodeGroup expected counts on the info channel, then streams data
messages. With no active NodeGroups it falls back to writing raw files
in the same wire encoding.
"""

from __future__ import annotations

import json
import logging
import struct
import threading
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import transport
from .protocol import (DetectorGeometry, FLAG_SYNTHETIC, InfoMap,
                       SectorHeader, SectorMessage, encode_info_map,
                       encode_sector_message)
from .transport import ChannelClosed, PushSocket

log = logging.getLogger(__name__)

# Injected electron events sit at mean + 7 sigma: above the background
# threshold (4-4.5 sigma) and below the x-ray threshold (10 sigma), so
# ground truth events survive counting by construction.
EVENT_SIGMA = 7.0
XRAY_VALUE = 65535
MAX_LOSS_PROBABILITY = 0.01


@dataclass(frozen=True)
class ScanSpec:
    """Full description of one synthetic scan; the stream is a pure
    function of this record."""

    scan_number: int
    scan_rows: int
    scan_cols: int
    frame_rows: int = 576
    frame_cols: int = 576
    event_rate: float = 0.0      # Poisson mean events per frame
    noise_mean: float = 100.0    # Gaussian background, ADU
    noise_stddev: float = 5.0
    xray_rate: float = 0.0       # Poisson mean saturating strikes per frame
    seed: int = 0
    loss_probability: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.loss_probability <= MAX_LOSS_PROBABILITY \
                and self.loss_probability != 1.0:
            raise ValueError(
                f"loss_probability {self.loss_probability} outside "
                f"[0, {MAX_LOSS_PROBABILITY}] (1.0 allowed for tests)"
            )
        if self.scan_rows < 1 or self.scan_cols < 1:
            raise ValueError("scan dimensions must be >= 1")

    @property
    def geometry(self) -> DetectorGeometry:
        return DetectorGeometry(self.frame_rows, self.frame_cols)

    @property
    def n_frames(self) -> int:
        return self.scan_rows * self.scan_cols

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def from_file(cls, path: str | Path) -> "ScanSpec":
        return cls(**json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ProducerPlan:
    """Which sector a producer owns and how frames split across threads."""

    sector_index: int
    thread_ranges: tuple[range, ...]

    @classmethod
    def build(cls, sector_index: int, n_frames: int,
              thread_count: int = 4) -> "ProducerPlan":
        if thread_count < 1:
            raise ValueError("thread_count must be >= 1")
        bounds = [n_frames * i // thread_count for i in range(thread_count + 1)]
        ranges = tuple(range(bounds[i], bounds[i + 1])
                       for i in range(thread_count))
        return cls(sector_index, ranges)

    def validate(self, n_frames: int) -> None:
        covered = sorted(f for r in self.thread_ranges for f in r)
        if covered != list(range(n_frames)):
            raise ValueError("thread ranges do not partition the scan")


@dataclass
class SectorTruth:
    """Ground-truth injected pixels, frame-global row-major indices."""

    event_pixels: list[int]
    xray_pixels: list[int]


@dataclass
class ThreadReport:
    sent: int = 0
    dropped: int = 0
    aborted: bool = False


def _sector_rng(spec: ScanSpec, frame_number: int,
                sector_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        [spec.seed, spec.scan_number, frame_number, sector_index]))


def generate_sector(spec: ScanSpec, frame_number: int, sector_index: int,
                    sequence: int = 0) -> tuple[SectorMessage, SectorTruth]:
    """Deterministically generate one sector and its ground-truth log."""
    geo = spec.geometry
    if not 0 <= frame_number < spec.n_frames:
        raise ValueError(f"frame_number {frame_number} out of range")
    rng = _sector_rng(spec, frame_number, sector_index)
    shape = (geo.sector_rows, geo.frame_cols)
    npix = geo.sector_pixels

    vals = rng.normal(spec.noise_mean, spec.noise_stddev, shape)
    n_events = rng.poisson(spec.event_rate / geo.n_sectors)
    n_events = min(n_events, npix)
    positions = rng.choice(npix, size=n_events, replace=False)
    vals.flat[positions] = spec.noise_mean + EVENT_SIGMA * spec.noise_stddev

    n_xray = rng.poisson(spec.xray_rate / geo.n_sectors)
    n_xray = min(n_xray, npix)
    xray_positions = rng.choice(npix, size=n_xray, replace=False)
    vals.flat[xray_positions] = XRAY_VALUE

    np.rint(vals, out=vals)
    np.clip(vals, 0, 65535, out=vals)
    payload = vals.astype(np.uint16)
    header = SectorHeader(spec.scan_number, frame_number, sector_index,
                          sequence, FLAG_SYNTHETIC)

    base = sector_index * geo.sector_rows * geo.frame_cols
    xray_set = {int(base + p) for p in xray_positions}
    truth = SectorTruth(
        event_pixels=sorted(int(base + p) for p in positions
                            if int(base + p) not in xray_set),
        xray_pixels=sorted(xray_set),
    )
    return SectorMessage(header, payload), truth


def generate_frame(spec: ScanSpec, frame_number: int) -> np.ndarray:
    """Assemble all four sectors of a frame (for oracles and baselines)."""
    geo = spec.geometry
    bands = [generate_sector(spec, frame_number, s)[0].payload
             for s in range(geo.n_sectors)]
    return np.vstack(bands)


def scan_truth(spec: ScanSpec) -> dict[int, SectorTruth]:
    """Ground truth per frame (frame-global indices, all sectors merged)."""
    out: dict[int, SectorTruth] = {}
    for f in range(spec.n_frames):
        events: list[int] = []
        xrays: list[int] = []
        for s in range(spec.geometry.n_sectors):
            _, t = generate_sector(spec, f, s)
            events.extend(t.event_pixels)
            xrays.extend(t.xray_pixels)
        out[f] = SectorTruth(sorted(events), sorted(xrays))
    return out


def expected_counts(frame_range: range | list[int],
                    nodegroup_uids: list[str]) -> dict[str, int]:
    """Exact per-UID counts under modulo routing; matches the aggregator
    message-for-message."""
    if not nodegroup_uids:
        raise ValueError("no NodeGroups; caller should fall back to disk")
    n = len(nodegroup_uids)
    counts = {uid: 0 for uid in nodegroup_uids}
    for f in frame_range:
        counts[nodegroup_uids[f % n]] += 1
    return counts


def _loss_rng(spec: ScanSpec, sector_index: int,
              thread_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        [spec.seed, spec.scan_number, sector_index, thread_index, 0x10055]))


def run_producer_thread(spec: ScanSpec, sector_index: int, thread_index: int,
                        frame_range: range, nodegroup_uids: list[str],
                        send, scan_meta_sender=None,
                        prebuilt: dict[int, list[bytes]] | None = None
                        ) -> ThreadReport:
    """Announce the info map, then stream (or drop) each sector in range.

    `send` takes a list of byte frames and must block on backpressure.
    With `prebuilt` (frame number to encoded frames), messages are sent
    as supplied instead of being generated, so callers can keep data
    synthesis out of timed sections.
    """
    report = ThreadReport()
    geo = spec.geometry
    info = InfoMap(spec.scan_number,
                   expected_counts(frame_range, nodegroup_uids))
    rng = _loss_rng(spec, sector_index, thread_index)
    try:
        send([encode_info_map(info)])
        sequence = 0
        for f in frame_range:
            if spec.loss_probability > 0 and \
                    rng.random() < spec.loss_probability:
                report.dropped += 1
                continue
            if prebuilt is not None:
                send(prebuilt[f])
            else:
                msg, _ = generate_sector(spec, f, sector_index, sequence)
                send(encode_sector_message(msg, geo))
            sequence += 1
            report.sent += 1
    except ChannelClosed:
        log.warning("channel closed mid-scan (sector %d thread %d)",
                    sector_index, thread_index)
        report.aborted = True
    return report


def fallback_raw_path(directory: str | Path, scan_number: int,
                      sector_index: int, thread_index: int) -> Path:
    return Path(directory) / (
        f"scan{scan_number}_sector{sector_index}_t{thread_index}.raw")


def fallback_write(spec: ScanSpec, sector_index: int, thread_index: int,
                   frame_range: range, directory: str | Path) -> Path:
    """Write the thread's stream as framed wire messages to a raw file."""
    path = fallback_raw_path(directory, spec.scan_number, sector_index,
                             thread_index)
    path.parent.mkdir(parents=True, exist_ok=True)
    geo = spec.geometry
    with open(path, "wb") as fh:
        for sequence, f in enumerate(frame_range):
            msg, _ = generate_sector(spec, f, sector_index, sequence)
            fh.write(transport.pack_message(
                encode_sector_message(msg, geo)))
    return path


def read_raw_file(path: str | Path,
                  geometry: DetectorGeometry) -> list[SectorMessage]:
    """Decode a fallback raw file back into sector messages."""
    from .protocol import decode_sector_message
    out = []
    with open(path, "rb") as fh:
        while True:
            frames = transport.read_message_from_file(fh)
            if frames is None:
                break
            out.append(decode_sector_message(frames, geometry))
    return out


class ProducerProcess:
    """One producer service: owns a sector, runs its threads against a
    live aggregator, or writes fallback files when no NodeGroups exist."""

    def __init__(self, spec: ScanSpec, sector_index: int,
                 aggregator_address: tuple[str, int] | None,
                 nodegroup_uids: list[str],
                 thread_count: int = 4,
                 fallback_dir: str | Path | None = None,
                 prebuilt: dict[int, list[bytes]] | None = None):
        self.spec = spec
        self.prebuilt = prebuilt
        self.sector_index = sector_index
        self.aggregator_address = aggregator_address
        self.nodegroup_uids = list(nodegroup_uids)
        self.plan = ProducerPlan.build(sector_index, spec.n_frames,
                                       thread_count)
        self.fallback_dir = fallback_dir
        self.reports: list[ThreadReport] = []
        self.fallback_paths: list[Path] = []

    def run(self) -> None:
        if not self.nodegroup_uids:
            if self.fallback_dir is None:
                raise ValueError("no NodeGroups and no fallback directory")
            for t, rng_ in enumerate(self.plan.thread_ranges):
                self.fallback_paths.append(fallback_write(
                    self.spec, self.sector_index, t, rng_,
                    self.fallback_dir))
            return
        threads = []
        self.reports = [ThreadReport() for _ in self.plan.thread_ranges]

        def worker(t: int, frame_range: range) -> None:
            sock = PushSocket(self.aggregator_address)
            try:
                sock.send(_hello_frames(self.spec, self.sector_index, t,
                                        len(self.plan.thread_ranges)))
                self.reports[t] = run_producer_thread(
                    self.spec, self.sector_index, t, frame_range,
                    self.nodegroup_uids, sock.send, prebuilt=self.prebuilt)
            finally:
                sock.close()

        for t, rng_ in enumerate(self.plan.thread_ranges):
            th = threading.Thread(target=worker, args=(t, rng_),
                                  name=f"prod-{self.sector_index}-{t}")
            th.start()
            threads.append(th)
        for th in threads:
            th.join()

    @property
    def sent(self) -> int:
        return sum(r.sent for r in self.reports)

    @property
    def dropped(self) -> int:
        return sum(r.dropped for r in self.reports)


def _hello_frames(spec: ScanSpec, sector_index: int, thread_index: int,
                  n_threads: int) -> list[bytes]:
    return [b"HELO", struct.pack(
        "<IHHHIIII", spec.scan_number, sector_index, thread_index, n_threads,
        spec.scan_rows, spec.scan_cols, spec.frame_rows, spec.frame_cols)]
