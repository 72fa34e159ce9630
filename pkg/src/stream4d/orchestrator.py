"""Session-management service: HTTP API over sessions, scans, and events.

Creates streaming sessions by spawning consumer processes through a
pluggable launcher, tracks scan records, persists them to an append-only
line-delimited log, and pushes session/scan/state/metrics events to
console subscribers.
"""

from __future__ import annotations

import json
import logging
import queue
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field, asdict
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import StreamingResponse
from pydantic import BaseModel

from .statestore import ClientKind, StateClient, Status

log = logging.getLogger(__name__)

SESSION_STATUSES = ("pending", "active", "stopping", "ended", "failed")
REGISTRATION_DEADLINE_S = 10.0

_SESSION_TRANSITIONS = {
    "pending": {"active", "failed"},
    "active": {"stopping", "failed"},
    "stopping": {"ended"},
    "ended": set(),
    "failed": set(),
}


@dataclass
class Session:
    session_id: str
    n_nodegroups: int
    params: dict
    status: str = "pending"
    created_at: float = field(default_factory=time.time)
    nodegroup_uids: list[str] = field(default_factory=list)

    def transition(self, new: str) -> None:
        if new not in _SESSION_TRANSITIONS[self.status]:
            raise ValueError(f"illegal session transition "
                             f"{self.status} -> {new}")
        self.status = new


@dataclass
class ScanRecord:
    scan_number: int
    session_id: str | None
    scan_rows: int = 0
    scan_cols: int = 0
    started_at: float = 0.0
    finished_at: float | None = None
    outputs: dict[str, str] = field(default_factory=dict)  # uid -> path
    completed: int = 0
    incomplete: int = 0
    deficit: int = 0
    mode: str = "streamed"
    lossy: bool = False
    flagged: bool = False
    reported_uids: list[str] = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return self.finished_at is not None


class ProcessLauncher:
    """Default launcher: consumer services as local child processes."""

    def __init__(self, state_address: tuple[str, int], out_dir: Path,
                 orchestrator_url: str | None = None):
        self.state_address = state_address
        self.out_dir = out_dir
        self.orchestrator_url = orchestrator_url

    def launch(self, uid: str, params: dict) -> subprocess.Popen:
        cmd = [sys.executable, "-m", "stream4d.cli", "consume",
               "--uid", uid,
               "--state-server",
               f"{self.state_address[0]}:{self.state_address[1]}",
               "--out", str(self.out_dir),
               "--threshold-n", str(params.get("n_sigma", 4.0))]
        if self.orchestrator_url:
            cmd += ["--orchestrator-url", self.orchestrator_url]
        return subprocess.Popen(cmd)

    def stop(self, handle: subprocess.Popen, timeout: float = 30.0) -> None:
        handle.terminate()  # drain signal: finish open scans, then exit
        try:
            handle.wait(timeout)
        except subprocess.TimeoutExpired:
            handle.kill()
            handle.wait(5)

    def kill(self, handle: subprocess.Popen) -> None:
        handle.kill()
        handle.wait(5)


class Orchestrator:
    """Owns all session/scan state; mutations serialize through one lock."""

    def __init__(self, state_address: tuple[str, int],
                 records_path: str | Path,
                 launcher=None,
                 out_dir: str | Path = "consumer-output"):
        self.records_path = Path(records_path)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.launcher = launcher or ProcessLauncher(state_address,
                                                    self.out_dir)
        self.sessions: dict[str, Session] = {}
        self.scans: dict[int, ScanRecord] = {}
        self._handles: dict[str, list] = {}
        self._lock = threading.Lock()
        self._subscribers: list[queue.Queue] = []
        self.state = StateClient(state_address, uid=f"orch-{uuid.uuid4().hex[:6]}",
                                 kind=ClientKind.orchestrator)
        self.state.sync()
        self.state.publish(Status.idle)
        self.state.start_heartbeat()
        self._closing = threading.Event()
        self._metrics = {"scan_number": 0, "bytes_received": 0,
                         "elapsed_ms": 0, "throughput_bytes_per_s": 0.0}
        self._restore()
        threading.Thread(target=self._metrics_loop, daemon=True,
                         name="orch-metrics").start()

    # -- persistence -------------------------------------------------------

    def _persist(self, kind: str, payload: dict) -> None:
        with open(self.records_path, "a") as fh:
            fh.write(json.dumps({"kind": kind, **payload}) + "\n")

    def _restore(self) -> None:
        if not self.records_path.exists():
            return
        for line in self.records_path.read_text().splitlines():
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                log.warning("skipping corrupt record line: %.60s", line)
                continue
            kind = rec.pop("kind", None)
            if kind == "session":
                s = Session(**rec)
                self.sessions[s.session_id] = s
            elif kind == "scan":
                r = ScanRecord(**rec)
                self.scans[r.scan_number] = r
            else:
                log.warning("skipping record of unknown kind %r", kind)
        # sessions live at crash have no processes anymore
        for s in self.sessions.values():
            if s.status in ("pending", "active", "stopping"):
                s.status = "failed"
                self._persist("session", asdict(s))

    # -- events --------------------------------------------------------------

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=1000)
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def emit(self, event_type: str, payload: dict) -> None:
        event = {"type": event_type, **payload}
        with self._lock:
            subs = list(self._subscribers)
        for q in subs:
            try:
                q.put_nowait(event)
            except queue.Full:
                pass

    def _metrics_loop(self) -> None:
        while not self._closing.wait(1.0):
            snap = self.state.snapshot()
            streaming = [st for st in snap.values()
                         if st.status == Status.streaming
                         and st.kind == ClientKind.nodegroup]
            self.emit("state", {"entries": {
                uid: _state_as_dict(st) for uid, st in snap.items()}})
            if streaming:
                self.emit("metrics", self._metrics.copy())

    def record_metrics(self, payload: dict) -> None:
        self._metrics = {
            "scan_number": payload.get("scan_number", 0),
            "bytes_received": payload.get("bytes_received", 0),
            "elapsed_ms": payload.get("elapsed_ms", 0),
            "throughput_bytes_per_s":
                payload.get("throughput_bytes_per_s", 0.0),
        }
        self.emit("metrics", self._metrics.copy())

    # -- sessions ------------------------------------------------------------

    def active_session(self) -> Session | None:
        for s in self.sessions.values():
            if s.status in ("pending", "active", "stopping"):
                return s
        return None

    def create_session(self, n_nodegroups: int, params: dict) -> Session:
        if n_nodegroups < 1:
            raise ValueError("n_nodegroups must be >= 1")
        with self._lock:
            if self.active_session() is not None:
                raise SessionConflict("another session is active")
            session = Session(session_id=uuid.uuid4().hex[:12],
                              n_nodegroups=n_nodegroups, params=params)
            self.sessions[session.session_id] = session
        uids = [f"ng-{session.session_id}-{i}" for i in range(n_nodegroups)]
        session.nodegroup_uids = uids
        handles = []
        try:
            for uid in uids:
                handles.append(self.launcher.launch(uid, params))
            self._handles[session.session_id] = handles
            deadline = time.monotonic() + REGISTRATION_DEADLINE_S
            while True:
                snap = self.state.snapshot()
                if all(uid in snap for uid in uids):
                    break
                if time.monotonic() > deadline:
                    raise TimeoutError("NodeGroups did not register in time")
                time.sleep(0.05)
            session.transition("active")
        except Exception:
            session.status = "failed"
            for h in handles:
                try:
                    self.launcher.kill(h)
                except Exception:
                    pass
            self._persist("session", asdict(session))
            self.emit("session", asdict(session))
            raise
        self._persist("session", asdict(session))
        self.emit("session", asdict(session))
        return session

    def stop_session(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise KeyError(session_id)
        if session.status in ("ended", "failed"):
            return session  # idempotent
        session.transition("stopping")
        self.emit("session", asdict(session))
        for h in self._handles.pop(session_id, []):
            self.launcher.stop(h)
        session.transition("ended")
        self._persist("session", asdict(session))
        self.emit("session", asdict(session))
        return session

    # -- scans -----------------------------------------------------------

    def record_scan_result(self, result: dict) -> ScanRecord:
        scan_number = int(result["scan_number"])
        session = self.active_session()
        with self._lock:
            rec = self.scans.get(scan_number)
            if rec is None:
                rec = ScanRecord(
                    scan_number=scan_number,
                    session_id=session.session_id if session else None,
                    started_at=time.time(),
                    mode=result.get("mode", "streamed"),
                    flagged=True)  # created retroactively from a report
                self.scans[scan_number] = rec
            uid = result.get("uid", "")
            if uid in rec.reported_uids:
                log.warning("duplicate scan result for %s / scan %d ignored",
                            uid, scan_number)
                return rec
            rec.reported_uids.append(uid)
            rec.outputs[uid] = result.get("path", "")
            rec.completed += int(result.get("completed", 0))
            rec.incomplete += int(result.get("incomplete", 0))
            rec.deficit += int(result.get("deficit", 0))
            if result.get("lossy"):
                rec.lossy = True
            expected = len(session.nodegroup_uids) if session else 1
            if len(rec.reported_uids) >= expected:
                rec.finished_at = time.time()
        self._persist("scan", asdict(rec))
        self.emit("scan", asdict(rec))
        return rec

    def record_fallback_scan(self, scan_number: int, scan_rows: int,
                             scan_cols: int, raw_paths: list[str]) -> ScanRecord:
        with self._lock:
            rec = ScanRecord(
                scan_number=scan_number, session_id=None,
                scan_rows=scan_rows, scan_cols=scan_cols,
                started_at=time.time(), finished_at=time.time(),
                outputs={f"raw-{i}": p for i, p in enumerate(raw_paths)},
                mode="disk_fallback")
            self.scans[scan_number] = rec
        self._persist("scan", asdict(rec))
        self.emit("scan", asdict(rec))
        return rec

    def close(self) -> None:
        self._closing.set()
        for sid in list(self._handles):
            try:
                self.stop_session(sid)
            except Exception:
                pass
        self.state.close()


class SessionConflict(Exception):
    pass


def _state_as_dict(st) -> dict:
    return {"uid": st.uid, "kind": st.kind.name, "sequence": st.sequence,
            "expected_messages": st.expected_messages,
            "scan_number": st.scan_number, "status": st.status.name,
            "last_heartbeat": st.last_heartbeat, "address": st.address}


class CreateSessionBody(BaseModel):
    n_nodegroups: int
    params: dict = {}


def create_app(orch: Orchestrator) -> FastAPI:
    app = FastAPI(title="stream4d orchestrator")

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        try:
            session = orch.create_session(body.n_nodegroups, body.params)
        except SessionConflict as exc:
            raise HTTPException(409, str(exc))
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        except TimeoutError as exc:
            raise HTTPException(500, str(exc))
        return asdict(session)

    @app.delete("/sessions/{session_id}")
    def stop_session(session_id: str):
        try:
            return asdict(orch.stop_session(session_id))
        except KeyError:
            raise HTTPException(404, f"unknown session {session_id}")

    @app.get("/sessions")
    def list_sessions():
        return [asdict(s) for s in orch.sessions.values()]

    @app.get("/scans")
    def list_scans(limit: int = 50):
        recs = sorted(orch.scans.values(), key=lambda r: r.scan_number,
                      reverse=True)[:limit]
        return [asdict(r) for r in recs]

    @app.get("/scans/{scan_number}")
    def get_scan(scan_number: int):
        rec = orch.scans.get(scan_number)
        if rec is None:
            raise HTTPException(404, f"unknown scan {scan_number}")
        return asdict(rec)

    @app.get("/state")
    def get_state():
        return {uid: _state_as_dict(st)
                for uid, st in orch.state.snapshot().items()}

    @app.post("/scan-results")
    def post_scan_result(result: dict):
        return asdict(orch.record_scan_result(result))

    @app.post("/metrics")
    def post_metrics(payload: dict):
        orch.record_metrics(payload)
        return {"ok": True}

    @app.get("/events")
    def events():
        def stream():
            q = orch.subscribe()
            try:
                # snapshot-on-connect mirrors the clone pattern
                yield _sse({"type": "state", "entries": {
                    uid: _state_as_dict(st)
                    for uid, st in orch.state.snapshot().items()}})
                while True:
                    try:
                        event = q.get(timeout=15.0)
                    except queue.Empty:
                        yield ": keepalive\n\n"
                        continue
                    yield _sse(event)
            finally:
                orch.unsubscribe(q)

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app


def _sse(event: dict) -> str:
    return f"data: {json.dumps(event)}\n\n"
