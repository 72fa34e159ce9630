"""Length-prefixed framing over TCP plus a bounded in-process channel.

A message is one or more frames sent atomically: u8 frame count, then per
frame a u32 byte length and the bytes. Push sides block on backpressure
(TCP send buffer, or the receiver's bounded in-flight queue); nothing is
ever dropped in transit.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading

DEFAULT_HWM = 1000

_LEN = struct.Struct("<I")


class ChannelClosed(Exception):
    """Peer or local side closed the channel."""


def pack_message(frames: list[bytes]) -> bytes:
    if not 1 <= len(frames) <= 255:
        raise ValueError(f"frame count {len(frames)} out of range")
    parts = [bytes([len(frames)])]
    for f in frames:
        parts.append(_LEN.pack(len(f)))
        parts.append(f)
    return b"".join(parts)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ChannelClosed("connection closed mid-message")
        buf.extend(chunk)
    return bytes(buf)


def send_message(sock: socket.socket, frames: list[bytes]) -> None:
    sock.sendall(pack_message(frames))


def _sendmsg_all(sock: socket.socket, frames: list[bytes]) -> None:
    """Send a framed message via scatter-gather I/O, skipping the join
    copy of pack_message; loops over partial sends."""
    if not 1 <= len(frames) <= 255:
        raise ValueError(f"frame count {len(frames)} out of range")
    parts: list[bytes] = [bytes([len(frames)])]
    for f in frames:
        parts.append(_LEN.pack(len(f)))
        parts.append(f)
    views = [memoryview(p) for p in parts]
    while views:
        n = sock.sendmsg(views)
        while views and n >= len(views[0]):
            n -= len(views[0])
            views.pop(0)
        if views and n:
            views[0] = views[0][n:]


def recv_message(sock: socket.socket) -> list[bytes]:
    """Read one complete multi-frame message. Raises ChannelClosed at EOF."""
    try:
        n_frames = _recv_exact(sock, 1)[0]
    except ChannelClosed:
        raise
    frames = []
    for _ in range(n_frames):
        (length,) = _LEN.unpack(_recv_exact(sock, 4))
        frames.append(_recv_exact(sock, length))
    return frames


def recv_message_buffered(fh) -> list[bytes]:
    """Read one message from a buffered socket file object.

    Cuts per-message syscalls versus recv_message; the hot receive paths
    (aggregator, pull server) use this.
    """
    head = fh.read(1)
    if not head:
        raise ChannelClosed("connection closed")
    frames = []
    for _ in range(head[0]):
        raw = fh.read(4)
        if len(raw) < 4:
            raise ChannelClosed("connection closed mid-message")
        (length,) = _LEN.unpack(raw)
        data = fh.read(length)
        if len(data) < length:
            raise ChannelClosed("connection closed mid-message")
        frames.append(data)
    return frames


def read_message_from_file(fh) -> list[bytes] | None:
    """Read one framed message from a binary file; None at clean EOF."""
    head = fh.read(1)
    if not head:
        return None
    frames = []
    for _ in range(head[0]):
        raw = fh.read(4)
        if len(raw) < 4:
            raise ChannelClosed("truncated file")
        (length,) = _LEN.unpack(raw)
        data = fh.read(length)
        if len(data) < length:
            raise ChannelClosed("truncated file")
        frames.append(data)
    return frames


class PushSocket:
    """Connecting side of a pipeline channel. Thread-safe sends."""

    def __init__(self, address: tuple[str, int], connect_timeout: float = 10.0):
        self.address = address
        self._sock = socket.create_connection(address, timeout=connect_timeout)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()
        self._closed = False

    def send(self, frames: list[bytes]) -> None:
        with self._lock:
            if self._closed:
                raise ChannelClosed("push socket closed")
            try:
                _sendmsg_all(self._sock, frames)
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                self._closed = True
                try:
                    self._sock.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                self._sock.close()


class PullServer:
    """Receiving side: accepts many pushers, fair-queues complete messages.

    Messages from all connections land in one bounded queue (the high-water
    mark); reader threads block when it is full, which propagates
    backpressure to senders via TCP.
    """

    _STOP = object()

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 hwm: int = DEFAULT_HWM, handler=None):
        """With `handler` set, messages are dispatched directly from the
        reader threads as handler(conn_id, frames) and the queue is
        bypassed; backpressure then comes from the handler's own speed."""
        self._handler = handler
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self.address = self._listener.getsockname()
        self._queue: queue.Queue = queue.Queue(maxsize=hwm)
        self._conns: list[socket.socket] = []
        self._lock = threading.Lock()
        self._closing = threading.Event()
        self._open_readers = 0
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"pull-accept-{self.address[1]}",
            daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._conns.append(conn)
                self._open_readers += 1
            threading.Thread(target=self._read_loop, args=(conn,),
                             daemon=True).start()

    def _read_loop(self, conn: socket.socket) -> None:
        conn_id = conn.fileno()
        fh = conn.makefile("rb", buffering=1 << 18)
        try:
            if self._handler is not None:
                while True:
                    frames = recv_message_buffered(fh)
                    self._handler(conn_id, frames)
            while True:
                frames = recv_message_buffered(fh)
                self._queue.put((conn_id, frames))
        except (ChannelClosed, OSError, ValueError):
            pass
        finally:
            fh.close()
            conn.close()
            with self._lock:
                self._open_readers -= 1

    def recv(self, timeout: float | None = None) -> tuple[int, list[bytes]]:
        """Next (connection id, frames); raises queue.Empty on timeout,
        ChannelClosed once the server is shut down and drained."""
        try:
            item = self._queue.get(timeout=timeout)
        except queue.Empty:
            if self._closing.is_set():
                raise ChannelClosed("pull server closed")
            raise
        if item is self._STOP:
            raise ChannelClosed("pull server closed")
        return item

    def close(self) -> None:
        self._closing.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.close()
            except OSError:
                pass
        try:
            self._queue.put_nowait(self._STOP)
        except queue.Full:
            pass


class InprocChannel:
    """Bounded in-process handoff queue with pipeline blocking semantics."""

    _STOP = object()

    def __init__(self, hwm: int = DEFAULT_HWM):
        self._queue: queue.Queue = queue.Queue(maxsize=hwm)
        self._closed = threading.Event()

    def send(self, item) -> None:
        if self._closed.is_set():
            raise ChannelClosed("channel closed")
        self._queue.put(item)

    def recv(self, timeout: float | None = None):
        item = self._queue.get(timeout=timeout)
        if item is self._STOP:
            self._queue.put(self._STOP)  # wake any other receiver
            raise ChannelClosed("channel closed")
        return item

    def close(self) -> None:
        if not self._closed.is_set():
            self._closed.set()
            self._queue.put(self._STOP)
