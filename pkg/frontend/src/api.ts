/** Thin typed client for the orchestrator HTTP API. */

import type { ClientEntry, ScanRecord, Session } from "./types";

type FetchFn = typeof fetch;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

export class OrchestratorClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchFn = fetch,
  ) {}

  async createSession(
    nNodegroups: number,
    params: Record<string, unknown> = {},
  ): Promise<Session> {
    return this.request("POST", "/sessions", {
      n_nodegroups: nNodegroups,
      params,
    });
  }

  async stopSession(sessionId: string): Promise<Session> {
    return this.request("DELETE", `/sessions/${encodeURIComponent(sessionId)}`);
  }

  async sessions(): Promise<Session[]> {
    return this.request("GET", "/sessions");
  }

  async scans(limit = 50): Promise<ScanRecord[]> {
    return this.request("GET", `/scans?limit=${limit}`);
  }

  async scan(scanNumber: number): Promise<ScanRecord> {
    return this.request("GET", `/scans/${scanNumber}`);
  }

  async state(): Promise<Record<string, ClientEntry>> {
    return this.request("GET", "/state");
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path, {
      method,
      headers: body === undefined ? {} : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const payload = await resp.json();
        if (payload && typeof payload.detail === "string") {
          detail = payload.detail;
        }
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }
}
