"""Central routing service: pull from producers, push to NodeGroups.

One logical thread per upstream producer (sector). Each combines the info
maps from that producer's threads, announces the combined totals to each
NodeGroup, then forwards every data message to the group selected by
frame_number modulo the group count. Only the header is inspected on the
hot path; payload bytes pass through untouched.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .consumer import ScanMeta
from .protocol import (InfoMap, N_SECTORS, decode_info_map, encode_info_map,
                       is_info_frame, peek_frame_number, peek_scan_number)
from .transport import ChannelClosed, PushSocket, recv_message_buffered

log = logging.getLogger(__name__)

_HELLO = struct.Struct("<IHHHIIII")


class ScanMismatch(ValueError):
    """Info maps from one producer disagree on the scan number."""


def combine_info(maps: list[InfoMap]) -> dict[str, int]:
    """Sum per-UID expected counts across one producer's thread maps."""
    if not maps:
        return {}
    scan = maps[0].scan_number
    totals: dict[str, int] = {}
    for m in maps:
        if m.scan_number != scan:
            raise ScanMismatch(
                f"info maps mix scans {scan} and {m.scan_number}")
        for uid, count in m.entries.items():
            totals[uid] = totals.get(uid, 0) + count
    return totals


def route(frame_number: int, n_groups: int) -> int:
    """Group index for a frame; all four sectors of a frame agree."""
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    return frame_number % n_groups


@dataclass
class Metrics:
    received: int = 0
    quarantined: int = 0
    forwarded: dict[str, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def count_forward(self, uid: str) -> None:
        with self._lock:
            self.received += 1
            self.forwarded[uid] = self.forwarded.get(uid, 0) + 1

    def count_quarantine(self) -> None:
        with self._lock:
            self.received += 1
            self.quarantined += 1

    def render(self) -> str:
        with self._lock:
            lines = [f"received {self.received}",
                     f"quarantined {self.quarantined}"]
            for uid in sorted(self.forwarded):
                lines.append(f"forwarded{{uid=\"{uid}\"}} "
                             f"{self.forwarded[uid]}")
        return "\n".join(lines) + "\n"


@dataclass
class _Hello:
    scan_number: int
    sector_index: int
    thread_index: int
    n_threads: int
    scan_rows: int
    scan_cols: int
    frame_rows: int
    frame_cols: int


class _ScanContext:
    """Routing table and per-sector info combiners, pinned for one scan."""

    def __init__(self, hello: _Hello, groups: list[tuple[str, tuple[str, int]]]):
        if not groups:
            raise ValueError("no NodeGroups available for routing")
        self.scan_number = hello.scan_number
        self.uids = [uid for uid, _ in groups]
        self.lock = threading.Lock()
        # one push socket per (sector, group) pair keeps each sector's
        # messages on a dedicated connection to every group
        self.sockets: dict[tuple[int, int], PushSocket] = {}
        self.addresses = dict(groups)
        self.pending_info: dict[int, list[InfoMap]] = {}
        self.info_sent: set[int] = set()
        self.expected_threads: dict[int, int] = {}
        self.open_conns = 0
        self.total_conns_expected = None
        self.closed_conns = 0
        self._meta = ScanMeta(
            hello.scan_number, hello.scan_rows, hello.scan_cols,
            hello.frame_rows, hello.frame_cols, len(groups), 0)

    def socket_for(self, sector: int, group: int) -> PushSocket:
        with self.lock:
            sock = self.sockets.get((sector, group))
            if sock is None:
                host, port = self.addresses[self.uids[group]]
                sock = PushSocket((host, port))
                self.sockets[(sector, group)] = sock
                meta = ScanMeta(
                    self._meta.scan_number, self._meta.scan_rows,
                    self._meta.scan_cols, self._meta.frame_rows,
                    self._meta.frame_cols, len(self.uids), group)
                sock.send(meta.encode())
            return sock

    def add_info(self, sector: int, n_threads: int,
                 info: InfoMap) -> dict[str, int] | None:
        """Collect one thread's map; returns combined totals once all of
        the sector's thread maps arrived."""
        with self.lock:
            self.expected_threads[sector] = n_threads
            maps = self.pending_info.setdefault(sector, [])
            maps.append(info)
            if len(maps) < n_threads or sector in self.info_sent:
                return None
            self.info_sent.add(sector)
            combined = combine_info(maps)
        return combined

    def close(self) -> None:
        with self.lock:
            for sock in self.sockets.values():
                sock.close()
            self.sockets.clear()


class AggregatorService:
    """Listens for producer connections and routes their streams."""

    def __init__(self, resolve_groups,
                 host: str = "127.0.0.1", port: int = 0,
                 metrics_port: int | None = None):
        """`resolve_groups(scan_number)` returns the pinned ordered list of
        (uid, (host, port)) NodeGroup data addresses for that scan."""
        self.resolve_groups = resolve_groups
        self.metrics = Metrics()
        self._contexts: dict[int, _ScanContext] = {}
        self._lock = threading.Lock()
        self._closing = threading.Event()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self.address = self._listener.getsockname()
        threading.Thread(target=self._accept_loop, daemon=True,
                         name="agg-accept").start()
        self._metrics_server = None
        if metrics_port is not None:
            self._start_metrics(host, metrics_port)

    # -- ingest ----------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._serve_conn, args=(conn,),
                             daemon=True).start()

    def _context_for(self, hello: _Hello) -> _ScanContext:
        with self._lock:
            ctx = self._contexts.get(hello.scan_number)
            if ctx is None:
                groups = self.resolve_groups(hello.scan_number)
                ctx = _ScanContext(hello, groups)
                ctx.total_conns_expected = N_SECTORS * hello.n_threads
                self._contexts[hello.scan_number] = ctx
            ctx.open_conns += 1
            return ctx

    def _serve_conn(self, conn: socket.socket) -> None:
        ctx = None
        fh = conn.makefile("rb", buffering=1 << 18)
        try:
            frames = recv_message_buffered(fh)
            if frames[0] != b"HELO":
                log.warning("connection without handshake dropped")
                return
            hello = _Hello(*_HELLO.unpack(frames[1]))
            ctx = self._context_for(hello)
            n_groups = len(ctx.uids)
            socks: dict[int, PushSocket] = {}  # per-connection cache
            while True:
                frames = recv_message_buffered(fh)
                head = frames[0]
                if is_info_frame(head):
                    combined = ctx.add_info(hello.sector_index,
                                            hello.n_threads,
                                            decode_info_map(head))
                    if combined is not None:
                        self._announce(ctx, hello.sector_index, combined)
                    continue
                scan = peek_scan_number(head)
                if scan != ctx.scan_number:
                    self.metrics.count_quarantine()
                    continue
                group = route(peek_frame_number(head), n_groups)
                sock = socks.get(group)
                if sock is None:
                    sock = ctx.socket_for(hello.sector_index, group)
                    socks[group] = sock
                sock.send(frames)
                self.metrics.count_forward(ctx.uids[group])
        except (ChannelClosed, OSError):
            pass
        except Exception:
            log.exception("aggregator connection failed")
        finally:
            fh.close()
            conn.close()
            if ctx is not None:
                self._conn_closed(ctx)

    def _announce(self, ctx: _ScanContext, sector: int,
                  combined: dict[str, int]) -> None:
        for g, uid in enumerate(ctx.uids):
            info = InfoMap(ctx.scan_number, {uid: combined.get(uid, 0)})
            ctx.socket_for(sector, g).send([encode_info_map(info)])

    def _conn_closed(self, ctx: _ScanContext) -> None:
        with self._lock:
            ctx.closed_conns += 1
            if (ctx.total_conns_expected is not None
                    and ctx.closed_conns >= ctx.total_conns_expected):
                ctx.close()
                self._contexts.pop(ctx.scan_number, None)

    # -- metrics ----------------------------------------------------------

    def _start_metrics(self, host: str, port: int) -> None:
        metrics = self.metrics

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):  # noqa: N802
                body = metrics.render().encode()
                self.send_response(200)
                self.send_header("Content-Type", "text/plain")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self._metrics_server = ThreadingHTTPServer((host, port), Handler)
        self.metrics_address = self._metrics_server.server_address
        threading.Thread(target=self._metrics_server.serve_forever,
                         daemon=True, name="agg-metrics").start()

    def close(self) -> None:
        self._closing.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for ctx in self._contexts.values():
                ctx.close()
            self._contexts.clear()
        if self._metrics_server is not None:
            self._metrics_server.shutdown()
