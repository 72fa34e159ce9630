/** Browser entry point: wires the reducer, API client, and SSE stream
 * to the static page in index.html. */

import { ApiError, OrchestratorClient } from "./api";
import {
  initialState,
  reduce,
  setConnection,
  type ConsoleState,
} from "./state";
import {
  renderChips,
  renderConnection,
  renderMetrics,
  renderScans,
  renderSessionPanel,
} from "./render";
import { EventStream } from "./stream";

const api = new OrchestratorClient("");
let state: ConsoleState = initialState();

function update(next: ConsoleState): void {
  state = next;
  render();
}

function render(): void {
  setText("connection", renderConnection(state));
  setText("chips", renderChips(state));
  setText("session-panel", renderSessionPanel(state));
  setText("scans", renderScans(state));
  setText("metrics", renderMetrics(state));
  bindSessionButtons();
}

function setText(id: string, html: string): void {
  const el = document.getElementById(id);
  if (el !== null) {
    el.innerHTML = html;
  }
}

function bindSessionButtons(): void {
  const start = document.getElementById("start-session");
  if (start !== null) {
    start.onclick = async () => {
      const input = document.getElementById(
        "n-nodegroups",
      ) as HTMLInputElement | null;
      const n = input === null ? 2 : Math.max(1, Number(input.value) || 2);
      await guarded(async () => {
        const session = await api.createSession(n);
        update(reduce(state, { type: "session", ...session }));
      });
    };
  }
  const stop = document.getElementById("stop-session");
  if (stop !== null) {
    stop.onclick = async () => {
      const sessionId = stop.dataset.session;
      if (sessionId === undefined) return;
      await guarded(async () => {
        const session = await api.stopSession(sessionId);
        update(reduce(state, { type: "session", ...session }));
      });
    };
  }
}

async function guarded(action: () => Promise<void>): Promise<void> {
  try {
    await action();
    setText("error", "");
  } catch (err) {
    const message = err instanceof ApiError ? err.message : String(err);
    setText("error", `<p class="error">${message}</p>`);
  }
}

async function boot(): Promise<void> {
  // prime the scan table; later changes arrive as SSE scan events
  try {
    const scans = await api.scans();
    let next = state;
    for (const scan of scans.reverse()) {
      next = reduce(next, { type: "scan", ...scan });
    }
    const sessions = await api.sessions();
    for (const session of sessions) {
      next = reduce(next, { type: "session", ...session });
    }
    update(next);
  } catch {
    // orchestrator not up yet; the SSE reconnect loop will recover
  }
  const stream = new EventStream("/events", {
    onEvent: (event) => update(reduce(state, event)),
    onConnection: (status) => update(setConnection(state, status)),
  });
  stream.start();
}

render();
void boot();
