"""Clone-pattern replicated key-value store.

A central sequencer server holds the authoritative map of client states.
Clients publish their own state; the server assigns a gapless global
sequence to every accepted update and broadcasts it to all connected
clients. A joining client receives a snapshot first, then the update
stream starting right after the snapshot point.
"""

from __future__ import annotations

import enum
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, replace

from .transport import ChannelClosed, recv_message, send_message

log = logging.getLogger(__name__)

STATE_MAGIC = 0x53344B56
STATE_VERSION = 1

HEARTBEAT_INTERVAL_MS = 500
DEFAULT_TTL_MS = 3000
TOMBSTONE_RETENTION_FACTOR = 10


class ClientKind(enum.IntEnum):
    producer = 0
    aggregator = 1
    nodegroup = 2
    orchestrator = 3


class Status(enum.IntEnum):
    idle = 0
    streaming = 1
    draining = 2
    offline = 3


# Legal status transitions; self-loops cover heartbeat republishes.
_ALLOWED = {
    Status.idle: {Status.idle, Status.streaming, Status.offline},
    Status.streaming: {Status.streaming, Status.draining, Status.offline},
    Status.draining: {Status.draining, Status.idle, Status.offline},
    Status.offline: {Status.offline, Status.idle},
}


def transition_allowed(old: Status, new: Status) -> bool:
    return new in _ALLOWED[old]


class StaleSequence(Exception):
    """Client update with a sequence not greater than the last seen."""


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class ClientState:
    uid: str
    kind: ClientKind
    sequence: int = 0
    expected_messages: int = 0
    scan_number: int = 0
    status: Status = Status.idle
    last_heartbeat: int = 0
    address: str = ""  # service discovery; "host:port" for data channels


@dataclass(frozen=True)
class StateUpdate:
    key: str
    value: ClientState | None  # None is a tombstone
    server_sequence: int


@dataclass(frozen=True)
class StateSnapshot:
    entries: dict[str, ClientState]
    as_of_sequence: int


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    return buf[off:off + n].decode("utf-8"), off + n


def encode_client_state(state: ClientState) -> bytes:
    return b"".join([
        _pack_str(state.uid),
        struct.pack("<BQQIBQ", int(state.kind), state.sequence,
                    state.expected_messages, state.scan_number,
                    int(state.status), state.last_heartbeat),
        _pack_str(state.address),
    ])


def decode_client_state(buf: bytes, off: int = 0) -> tuple[ClientState, int]:
    uid, off = _unpack_str(buf, off)
    kind, seq, expected, scan, status, hb = struct.unpack_from("<BQQIBQ", buf, off)
    off += struct.calcsize("<BQQIBQ")
    address, off = _unpack_str(buf, off)
    return ClientState(uid, ClientKind(kind), seq, expected, scan,
                       Status(status), hb, address), off


def encode_update(update: StateUpdate) -> bytes:
    parts = [struct.pack("<IHQ", STATE_MAGIC, STATE_VERSION,
                         update.server_sequence),
             _pack_str(update.key),
             struct.pack("<B", 0 if update.value is None else 1)]
    if update.value is not None:
        parts.append(encode_client_state(update.value))
    return b"".join(parts)


def decode_update(buf: bytes) -> StateUpdate:
    magic, version, seq = struct.unpack_from("<IHQ", buf, 0)
    if magic != STATE_MAGIC:
        raise ChannelClosed(f"bad state magic 0x{magic:08x}")
    if version != STATE_VERSION:
        raise ChannelClosed(f"unsupported state version {version}")
    off = struct.calcsize("<IHQ")
    key, off = _unpack_str(buf, off)
    present = buf[off]
    off += 1
    value = None
    if present:
        value, off = decode_client_state(buf, off)
    return StateUpdate(key, value, seq)


def active_nodegroups(local_map: dict[str, ClientState], now: int,
                      ttl_ms: int = DEFAULT_TTL_MS) -> list[str]:
    """Live NodeGroup UIDs in lexicographic order.

    The order defines the global group index used by producers and the
    aggregator alike; an empty list means "fall back to disk".
    """
    uids = [
        uid for uid, st in local_map.items()
        if st.kind == ClientKind.nodegroup
        and st.status in (Status.idle, Status.streaming)
        and now - st.last_heartbeat <= ttl_ms
    ]
    return sorted(uids)


def stale_uids(entries: dict[str, ClientState], now: int,
               ttl_ms: int) -> list[str]:
    """UIDs past their heartbeat TTL that are not already offline."""
    return [uid for uid, st in entries.items()
            if st.status != Status.offline
            and now - st.last_heartbeat > ttl_ms]


class StateServer:
    """Central sequencer. All map mutations serialize through one lock."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 ttl_ms: int = DEFAULT_TTL_MS, expire: bool = True):
        self.ttl_ms = ttl_ms
        self._entries: dict[str, ClientState] = {}
        self._tombstones: dict[str, int] = {}  # uid -> deletion time ms
        self._client_seq: dict[str, int] = {}
        self._server_sequence = 0
        self._lock = threading.Lock()
        self._subscribers: list[tuple[socket.socket, threading.Lock]] = []
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self.address = self._listener.getsockname()
        self._closing = threading.Event()
        threading.Thread(target=self._accept_loop, daemon=True,
                         name="state-accept").start()
        if expire:
            threading.Thread(target=self._expire_loop, daemon=True,
                             name="state-expire").start()

    # -- sequencer core ----------------------------------------------------

    def apply(self, state: ClientState) -> StateUpdate | None:
        """Apply a client update; returns the sequenced update, or None if
        the client sequence was stale (replay)."""
        with self._lock:
            last = self._client_seq.get(state.uid)
            if last is not None and state.sequence <= last:
                return None
            self._client_seq[state.uid] = state.sequence
            self._entries[state.uid] = state
            self._tombstones.pop(state.uid, None)
            self._server_sequence += 1
            update = StateUpdate(state.uid, state, self._server_sequence)
            self._broadcast(update)
            return update

    def delete(self, uid: str) -> StateUpdate | None:
        with self._lock:
            if uid not in self._entries:
                return None
            del self._entries[uid]
            self._tombstones[uid] = now_ms()
            self._server_sequence += 1
            update = StateUpdate(uid, None, self._server_sequence)
            self._broadcast(update)
            return update

    def expire_stale(self, now: int | None = None,
                     ttl_ms: int | None = None) -> list[str]:
        """Mark entries past TTL offline and broadcast the change."""
        now = now_ms() if now is None else now
        ttl = self.ttl_ms if ttl_ms is None else ttl_ms
        expired = []
        with self._lock:
            for uid in stale_uids(self._entries, now, ttl):
                st = replace(self._entries[uid], status=Status.offline)
                self._entries[uid] = st
                self._server_sequence += 1
                self._broadcast(StateUpdate(uid, st, self._server_sequence))
                expired.append(uid)
            # compact old tombstones
            cutoff = now - TOMBSTONE_RETENTION_FACTOR * ttl
            for uid in [u for u, t in self._tombstones.items() if t < cutoff]:
                del self._tombstones[uid]
        return expired

    def snapshot(self) -> StateSnapshot:
        with self._lock:
            return StateSnapshot(dict(self._entries), self._server_sequence)

    @property
    def server_sequence(self) -> int:
        with self._lock:
            return self._server_sequence

    # -- networking --------------------------------------------------------

    def _broadcast(self, update: StateUpdate) -> None:
        # caller holds self._lock: broadcast order == sequence order
        raw = encode_update(update)
        dead = []
        for sub in self._subscribers:
            sock, send_lock = sub
            try:
                with send_lock:
                    send_message(sock, [b"UPD", raw])
            except OSError:
                dead.append(sub)
        for sub in dead:
            self._subscribers.remove(sub)

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._serve_conn, args=(conn,),
                             daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        send_lock = threading.Lock()
        sub = (conn, send_lock)
        try:
            while True:
                frames = recv_message(conn)
                tag = frames[0]
                if tag == b"SNAP":
                    with self._lock:
                        snap = self._encode_snapshot()
                        self._subscribers.append(sub)
                    with send_lock:
                        send_message(conn, [b"SNAP", snap])
                elif tag == b"UPD":
                    state, _ = decode_client_state(frames[1])
                    if self.apply(state) is None:
                        with send_lock:
                            send_message(conn, [b"STALE", state.uid.encode()])
                elif tag == b"DEL":
                    self.delete(frames[1].decode("utf-8"))
        except (ChannelClosed, OSError):
            pass
        finally:
            with self._lock:
                if sub in self._subscribers:
                    self._subscribers.remove(sub)
            conn.close()

    def _expire_loop(self) -> None:
        while not self._closing.wait(HEARTBEAT_INTERVAL_MS / 1000):
            self.expire_stale()

    def _encode_snapshot(self) -> bytes:
        # caller holds self._lock
        parts = [struct.pack("<QI", self._server_sequence, len(self._entries))]
        for uid in sorted(self._entries):
            raw = encode_client_state(self._entries[uid])
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    def close(self) -> None:
        self._closing.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for sock, _ in self._subscribers:
                try:
                    sock.close()
                except OSError:
                    pass
            self._subscribers.clear()


class StateClient:
    """Embeddable clone-pattern client: snapshot on join, then updates."""

    def __init__(self, address: tuple[str, int], uid: str = "",
                 kind: ClientKind = ClientKind.orchestrator,
                 connect_deadline: float = 10.0):
        self.uid = uid
        self.kind = kind
        self._map: dict[str, ClientState] = {}
        self._map_lock = threading.Lock()
        self._sequence = 0
        self._own_state: ClientState | None = None
        self._as_of = 0
        self._last_server_seq = 0
        self.gap_violations = 0
        self._synced = threading.Event()
        self._closing = threading.Event()
        self._hb_thread: threading.Thread | None = None
        self._sock = self._connect(address, connect_deadline)
        self._send_lock = threading.Lock()

    @staticmethod
    def _connect(address, deadline: float) -> socket.socket:
        delay = 0.05
        end = time.monotonic() + deadline
        while True:
            try:
                sock = socket.create_connection(address, timeout=deadline)
                sock.settimeout(None)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return sock
            except OSError:
                if time.monotonic() >= end:
                    raise
                time.sleep(delay)
                delay = min(delay * 2, 1.0)

    def sync(self, timeout: float = 10.0) -> StateSnapshot:
        """Request a snapshot and start the continuous update stream."""
        with self._send_lock:
            send_message(self._sock, [b"SNAP"])
        threading.Thread(target=self._recv_loop, daemon=True,
                         name=f"state-client-{self.uid}").start()
        if not self._synced.wait(timeout):
            raise TimeoutError("state snapshot not received")
        with self._map_lock:
            return StateSnapshot(dict(self._map), self._as_of)

    def _recv_loop(self) -> None:
        try:
            while not self._closing.is_set():
                frames = recv_message(self._sock)
                tag = frames[0]
                if tag == b"SNAP":
                    self._apply_snapshot(frames[1])
                    self._synced.set()
                elif tag == b"UPD":
                    self._apply_update(decode_update(frames[1]))
                elif tag == b"STALE":
                    log.warning("stale update rejected for %s",
                                frames[1].decode())
        except (ChannelClosed, OSError):
            if not self._closing.is_set():
                log.warning("state stream lost for %s", self.uid or "<anon>")

    def _apply_snapshot(self, raw: bytes) -> None:
        as_of, n = struct.unpack_from("<QI", raw, 0)
        off = struct.calcsize("<QI")
        entries = {}
        for _ in range(n):
            (length,) = struct.unpack_from("<I", raw, off)
            off += 4
            state, _ = decode_client_state(raw[off:off + length])
            off += length
            entries[state.uid] = state
        with self._map_lock:
            self._map = entries
            self._as_of = as_of
            self._last_server_seq = as_of

    def _apply_update(self, update: StateUpdate) -> None:
        with self._map_lock:
            if update.server_sequence <= self._last_server_seq:
                return  # snapshot already covered it
            if update.server_sequence != self._last_server_seq + 1:
                self.gap_violations += 1
            self._last_server_seq = update.server_sequence
            if update.value is None:
                self._map.pop(update.key, None)
            else:
                self._map[update.key] = update.value

    # -- publishing --------------------------------------------------------

    def publish(self, status: Status, scan_number: int = 0,
                expected_messages: int = 0, address: str | None = None) -> ClientState:
        if not self.uid:
            raise ValueError("client has no uid; cannot publish")
        prev = self._own_state
        if prev is not None and not transition_allowed(prev.status, status):
            raise ValueError(f"illegal status transition "
                             f"{prev.status.name} -> {status.name}")
        self._sequence += 1
        state = ClientState(
            uid=self.uid, kind=self.kind, sequence=self._sequence,
            expected_messages=expected_messages, scan_number=scan_number,
            status=status, last_heartbeat=now_ms(),
            address=address if address is not None
            else (prev.address if prev else ""),
        )
        self._own_state = state
        with self._send_lock:
            send_message(self._sock, [b"UPD", encode_client_state(state)])
        return state

    def heartbeat(self) -> None:
        """Republish own state with a fresh heartbeat timestamp."""
        st = self._own_state
        if st is None:
            return
        self.publish(st.status, st.scan_number, st.expected_messages,
                     st.address)

    def start_heartbeat(self, interval_ms: int = HEARTBEAT_INTERVAL_MS) -> None:
        if self._hb_thread is not None:
            return

        def loop():
            while not self._closing.wait(interval_ms / 1000):
                try:
                    self.heartbeat()
                except (OSError, ChannelClosed):
                    return

        self._hb_thread = threading.Thread(target=loop, daemon=True,
                                           name=f"hb-{self.uid}")
        self._hb_thread.start()

    def deregister(self) -> None:
        if self.uid:
            try:
                with self._send_lock:
                    send_message(self._sock, [b"DEL", self.uid.encode()])
            except (OSError, ChannelClosed):
                pass

    # -- reads ---------------------------------------------------------------

    def snapshot(self) -> dict[str, ClientState]:
        with self._map_lock:
            return dict(self._map)

    def active_nodegroups(self, now: int | None = None,
                          ttl_ms: int = DEFAULT_TTL_MS) -> list[str]:
        return active_nodegroups(self.snapshot(),
                                 now_ms() if now is None else now, ttl_ms)

    def get(self, uid: str) -> ClientState | None:
        with self._map_lock:
            return self._map.get(uid)

    @property
    def last_server_sequence(self) -> int:
        with self._map_lock:
            return self._last_server_seq

    def close(self) -> None:
        self._closing.set()
        try:
            self._sock.close()
        except OSError:
            pass
