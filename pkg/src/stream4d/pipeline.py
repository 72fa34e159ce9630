"""Loopback wiring: stand up the whole pipeline in one process.

Used by the bench harness, the test suite, and the CLI demo path. All
services speak the same TCP wire protocol they use when deployed as
separate processes.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import counting, transport
from .aggregator import AggregatorService
from .consumer import CountingParams, NodeGroupService, ScanResult
from .counting import Thresholds
from .producer import (ProducerProcess, ScanSpec, _hello_frames,
                       expected_counts, generate_frame)
from .protocol import N_SECTORS, peek_frame_number, encode_info_map, InfoMap
from .statestore import StateClient, StateServer
from .transport import PushSocket

log = logging.getLogger(__name__)


def thresholds_for_spec(spec: ScanSpec,
                        n_sigma: float = counting.DEFAULT_BACKGROUND_SIGMA,
                        sample_count: int = counting.DEFAULT_SAMPLE_COUNT
                        ) -> Thresholds:
    """Estimate thresholds from uniformly spaced regenerated sample frames.

    Deterministic given only the scan parameters, so every NodeGroup and
    the offline oracle share identical thresholds regardless of group
    count.
    """
    fns = counting.sample_frame_numbers(spec.n_frames, sample_count)
    frames = [generate_frame(spec, f) for f in fns]
    return counting.estimate_thresholds(frames, n_sigma)


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host, int(port)


@dataclass
class StreamingRunResult:
    spec: ScanSpec
    group_results: list[ScanResult]
    producer_sent: int
    producer_dropped: int
    elapsed_seconds: float
    group_paths: list[Path] = field(default_factory=list)

    @property
    def completed(self) -> int:
        return sum(r.completed for r in self.group_results)

    @property
    def incomplete(self) -> int:
        return sum(r.incomplete for r in self.group_results)

    @property
    def lossy(self) -> bool:
        return any(r.lossy for r in self.group_results)


class LoopbackPipeline:
    """Statestore + NodeGroups + aggregator on loopback TCP."""

    def __init__(self, n_nodegroups: int, out_dir: str | Path,
                 params: CountingParams | None = None,
                 workers: int | None = None):
        self.out_dir = Path(out_dir)
        self.state_server = StateServer()
        self.groups = []
        self._result_times: dict[tuple[str, int], float] = {}
        for i in range(n_nodegroups):
            g = NodeGroupService(
                f"ng-{i}", self.state_server.address, self.out_dir,
                params=params, workers=workers,
                result_callback=self._on_result)
            g.start()
            self.groups.append(g)
        self.state_client = StateClient(self.state_server.address)
        self.state_client.sync()
        self._pinned: dict[int, list] = {}
        self.aggregator = AggregatorService(self._resolve)

    def _on_result(self, result: ScanResult) -> None:
        self._result_times[(result.uid, result.scan_number)] = time.monotonic()

    def _resolve(self, scan_number: int):
        groups = self._pinned.get(scan_number)
        if groups is None:
            uids = self.state_client.active_nodegroups()
            groups = [(uid, parse_address(self.state_client.get(uid).address))
                      for uid in uids]
            self._pinned[scan_number] = groups
        return groups

    def pinned_uids(self, scan_number: int) -> list[str]:
        return [uid for uid, _ in self._resolve(scan_number)]

    def wait_for_membership(self, count: int, timeout: float = 10.0) -> None:
        end = time.monotonic() + timeout
        while len(self.state_client.active_nodegroups()) < count:
            if time.monotonic() > end:
                raise TimeoutError("NodeGroups did not register in time")
            time.sleep(0.01)

    def run_scan(self, spec: ScanSpec, thread_count: int = 4,
                 prebuilt: dict[int, dict[int, list[bytes]]] | None = None,
                 ) -> StreamingRunResult:
        """Stream one scan through live producers and collect all results.

        `prebuilt` optionally maps sector index to ready-encoded messages
        so producers replay instead of generating.
        """
        self.wait_for_membership(len(self.groups))
        uids = self.pinned_uids(spec.scan_number)
        already = {g.uid: len(g.results) for g in self.groups}
        producers = [ProducerProcess(spec, s, self.aggregator.address, uids,
                                     thread_count,
                                     prebuilt=None if prebuilt is None
                                     else prebuilt[s])
                     for s in range(N_SECTORS)]
        t0 = time.monotonic()
        threads = [threading.Thread(target=p.run, name=f"producer-{p.sector_index}")
                   for p in producers]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        return self._collect(spec, producers, already, t0)

    def replay_scan(self, spec: ScanSpec, raw_paths: dict[tuple[int, int], Path],
                    ) -> StreamingRunResult:
        """Replay fallback raw files through the pipeline; must be
        indistinguishable from a live streamed run of the same spec."""
        self.wait_for_membership(len(self.groups))
        uids = self.pinned_uids(spec.scan_number)
        already = {g.uid: len(g.results) for g in self.groups}
        by_sector: dict[int, list[tuple[int, Path]]] = {}
        for (sector, thread), path in raw_paths.items():
            by_sector.setdefault(sector, []).append((thread, path))
        t0 = time.monotonic()
        threads = []
        for sector, items in by_sector.items():
            for thread_index, path in items:
                th = threading.Thread(
                    target=self._replay_thread,
                    args=(spec, sector, thread_index, len(items), path, uids))
                th.start()
                threads.append(th)
        for th in threads:
            th.join()
        return self._collect(spec, [], already, t0)

    def _replay_thread(self, spec: ScanSpec, sector: int, thread_index: int,
                       n_threads: int, path: Path, uids: list[str]) -> None:
        messages = []
        with open(path, "rb") as fh:
            while True:
                frames = transport.read_message_from_file(fh)
                if frames is None:
                    break
                messages.append(frames)
        frame_numbers = [peek_frame_number(m[0]) for m in messages]
        sock = PushSocket(self.aggregator.address)
        try:
            sock.send(_hello_frames(spec, sector, thread_index, n_threads))
            info = InfoMap(spec.scan_number,
                           expected_counts(frame_numbers, uids))
            sock.send([encode_info_map(info)])
            for frames in messages:
                sock.send(frames)
        finally:
            sock.close()

    def _collect(self, spec: ScanSpec, producers: list[ProducerProcess],
                 already: dict[str, int], t0: float,
                 timeout: float = 120.0) -> StreamingRunResult:
        results = []
        for g in self.groups:
            got = g.wait_for_results(already[g.uid] + 1, timeout)
            results.append(got[already[g.uid]])
        t1 = max(self._result_times[(r.uid, r.scan_number)] for r in results)
        return StreamingRunResult(
            spec=spec,
            group_results=results,
            producer_sent=sum(p.sent for p in producers),
            producer_dropped=sum(p.dropped for p in producers),
            elapsed_seconds=t1 - t0,
            group_paths=[Path(r.path) for r in results])

    def close(self) -> None:
        self.aggregator.close()
        for g in self.groups:
            g.stop()
        self.state_client.close()
        self.state_server.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_streaming_scan(spec: ScanSpec, n_nodegroups: int,
                       out_dir: str | Path,
                       params: CountingParams | None = None,
                       thread_count: int = 4,
                       workers: int | None = None) -> StreamingRunResult:
    """One-shot convenience: stand up a pipeline, stream one scan, tear
    everything down."""
    with LoopbackPipeline(n_nodegroups, out_dir, params, workers) as pipe:
        return pipe.run_scan(spec, thread_count)
