/** Pure console state and its reducer.
 *
 * All mutation happens by reducing events from the orchestrator's SSE
 * stream (plus local connection status changes), so the UI can be
 * re-rendered from a single immutable snapshot and the reducer can be
 * tested without a DOM.
 */

import type {
  ClientEntry,
  ConnectionStatus,
  ConsoleEvent,
  Metrics,
  ScanRecord,
  Session,
} from "./types";

export const MAX_SCANS = 100;

export interface ConsoleState {
  connection: ConnectionStatus;
  entries: Record<string, ClientEntry>;
  sessions: Record<string, Session>;
  scans: ScanRecord[]; // newest first, capped at MAX_SCANS
  metrics: Metrics | null;
  lastEventAt: number | null;
}

export function initialState(): ConsoleState {
  return {
    connection: "connecting",
    entries: {},
    sessions: {},
    scans: [],
    metrics: null,
    lastEventAt: null,
  };
}

export function reduce(
  state: ConsoleState,
  event: ConsoleEvent,
  now: number = Date.now(),
): ConsoleState {
  switch (event.type) {
    case "state": {
      // snapshot on (re)connect replaces the entry map wholesale
      return { ...state, entries: { ...event.entries }, lastEventAt: now };
    }
    case "session": {
      const { type: _, ...session } = event;
      return {
        ...state,
        sessions: { ...state.sessions, [session.session_id]: session },
        lastEventAt: now,
      };
    }
    case "scan": {
      const { type: _, ...record } = event;
      return { ...state, scans: upsertScan(state.scans, record), lastEventAt: now };
    }
    case "metrics": {
      const { type: _, ...metrics } = event;
      return { ...state, metrics, lastEventAt: now };
    }
  }
}

export function setConnection(
  state: ConsoleState,
  connection: ConnectionStatus,
): ConsoleState {
  return state.connection === connection ? state : { ...state, connection };
}

function upsertScan(scans: ScanRecord[], record: ScanRecord): ScanRecord[] {
  const rest = scans.filter((s) => s.scan_number !== record.scan_number);
  rest.push(record);
  rest.sort((a, b) => b.scan_number - a.scan_number);
  return rest.slice(0, MAX_SCANS);
}

export function activeSession(state: ConsoleState): Session | null {
  for (const s of Object.values(state.sessions)) {
    if (s.status === "pending" || s.status === "active" || s.status === "stopping") {
      return s;
    }
  }
  return null;
}

/** One chip per state-store client, for the live status strip. */
export interface Chip {
  uid: string;
  kind: ClientEntry["kind"];
  status: ClientEntry["status"];
  scanNumber: number;
  stale: boolean;
}

export const STALE_AFTER_MS = 15_000;

export function statusChips(
  entries: Record<string, ClientEntry>,
  nowMs: number = Date.now(),
): Chip[] {
  return Object.values(entries)
    .sort((a, b) => a.uid.localeCompare(b.uid))
    .map((e) => ({
      uid: e.uid,
      kind: e.kind,
      status: e.status,
      scanNumber: e.scan_number,
      stale: nowMs - e.last_heartbeat > STALE_AFTER_MS,
    }));
}
