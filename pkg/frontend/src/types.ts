/** Wire types mirrored from the orchestrator HTTP API. */

export interface ClientEntry {
  uid: string;
  kind: "producer" | "aggregator" | "nodegroup" | "orchestrator";
  sequence: number;
  expected_messages: number;
  scan_number: number;
  status: "idle" | "streaming" | "draining" | "offline";
  last_heartbeat: number; // epoch milliseconds
  address: string;
}

export interface Session {
  session_id: string;
  n_nodegroups: number;
  params: Record<string, unknown>;
  status: "pending" | "active" | "stopping" | "ended" | "failed";
  created_at: number; // epoch seconds
  nodegroup_uids: string[];
}

export interface ScanRecord {
  scan_number: number;
  session_id: string | null;
  scan_rows: number;
  scan_cols: number;
  started_at: number;
  finished_at: number | null;
  outputs: Record<string, string>;
  completed: number;
  incomplete: number;
  deficit: number;
  mode: "streamed" | "disk_fallback";
  lossy: boolean;
  flagged: boolean;
  reported_uids: string[];
}

export interface Metrics {
  scan_number: number;
  bytes_received: number;
  elapsed_ms: number;
  throughput_bytes_per_s: number;
}

/** Server-sent events; the stream always opens with a "state" snapshot. */
export type ConsoleEvent =
  | ({ type: "state" } & { entries: Record<string, ClientEntry> })
  | ({ type: "session" } & Session)
  | ({ type: "scan" } & ScanRecord)
  | ({ type: "metrics" } & Metrics);

export type ConnectionStatus = "connecting" | "open" | "lost";
