/** HTML fragment builders; pure string functions so they test headlessly. */

import { activeSession, statusChips, type ConsoleState } from "./state";
import type { ScanRecord } from "./types";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderConnection(state: ConsoleState): string {
  return `<span class="conn conn-${state.connection}">${state.connection}</span>`;
}

export function renderChips(state: ConsoleState, nowMs: number = Date.now()): string {
  const chips = statusChips(state.entries, nowMs);
  if (chips.length === 0) {
    return '<p class="empty">no clients registered; producers fall back to raw files</p>';
  }
  return chips
    .map((c) => {
      const classes = ["chip", `chip-${c.status}`, c.stale ? "chip-stale" : ""]
        .filter(Boolean)
        .join(" ");
      const scan = c.status === "streaming" || c.status === "draining"
        ? ` scan ${c.scanNumber}`
        : "";
      return `<span class="${classes}" data-uid="${escapeHtml(c.uid)}">` +
        `${escapeHtml(c.uid)} (${c.kind}) ${c.status}${scan}</span>`;
    })
    .join("\n");
}

export function renderSessionPanel(state: ConsoleState): string {
  const session = activeSession(state);
  if (session === null) {
    return `
      <label>NodeGroups
        <input id="n-nodegroups" type="number" min="1" value="2">
      </label>
      <button id="start-session">Start session</button>`;
  }
  return `
    <p>session <code>${escapeHtml(session.session_id)}</code>
       (${session.status}, ${session.n_nodegroups} groups)</p>
    <button id="stop-session" data-session="${escapeHtml(session.session_id)}">
      Stop session
    </button>`;
}

export function renderScanRow(scan: ScanRecord): string {
  const flags = [
    scan.lossy ? "lossy" : "",
    scan.flagged ? "flagged" : "",
    scan.mode === "disk_fallback" ? "fallback" : "",
  ]
    .filter(Boolean)
    .join(", ");
  const status = scan.finished_at === null ? "running" : "finished";
  return (
    `<tr class="${scan.lossy ? "row-lossy" : ""}">` +
    `<td>${scan.scan_number}</td>` +
    `<td>${scan.scan_rows}x${scan.scan_cols}</td>` +
    `<td>${status}</td>` +
    `<td>${scan.completed}</td>` +
    `<td>${scan.incomplete}</td>` +
    `<td>${escapeHtml(flags || "-")}</td>` +
    `</tr>`
  );
}

export function renderScans(state: ConsoleState): string {
  if (state.scans.length === 0) {
    return '<p class="empty">no scans recorded yet</p>';
  }
  const rows = state.scans.map(renderScanRow).join("\n");
  return (
    "<table><thead><tr>" +
    "<th>scan</th><th>raster</th><th>status</th>" +
    "<th>completed</th><th>incomplete</th><th>flags</th>" +
    "</tr></thead><tbody>" +
    rows +
    "</tbody></table>"
  );
}

export function renderMetrics(state: ConsoleState): string {
  const m = state.metrics;
  if (m === null) {
    return '<p class="empty">no throughput reported yet</p>';
  }
  const mb = m.bytes_received / (1024 * 1024);
  const rate = m.throughput_bytes_per_s / (1024 * 1024);
  return (
    `<p>scan ${m.scan_number}: ${mb.toFixed(1)} MiB received, ` +
    `${rate.toFixed(1)} MiB/s</p>`
  );
}
