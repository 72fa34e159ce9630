/** Server-sent event subscription with parsing and reconnect tracking.
 *
 * The /events stream opens with a full state snapshot, so every
 * reconnect repairs the console's entry map without extra requests.
 */

import type { ConnectionStatus, ConsoleEvent } from "./types";

export interface EventSourceLike {
  onopen: ((ev: unknown) => void) | null;
  onerror: ((ev: unknown) => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
  close(): void;
}

type EventSourceFactory = (url: string) => EventSourceLike;

export interface StreamHandlers {
  onEvent(event: ConsoleEvent): void;
  onConnection(status: ConnectionStatus): void;
}

const KNOWN_TYPES = new Set(["state", "session", "scan", "metrics"]);

export function parseEvent(data: string): ConsoleEvent | null {
  let payload: unknown;
  try {
    payload = JSON.parse(data);
  } catch {
    return null;
  }
  if (
    typeof payload !== "object" ||
    payload === null ||
    !KNOWN_TYPES.has((payload as { type?: unknown }).type as string)
  ) {
    return null;
  }
  return payload as ConsoleEvent;
}

export class EventStream {
  private source: EventSourceLike | null = null;

  constructor(
    private readonly url: string,
    private readonly handlers: StreamHandlers,
    private readonly factory: EventSourceFactory = (u) =>
      new EventSource(u) as unknown as EventSourceLike,
  ) {}

  start(): void {
    this.handlers.onConnection("connecting");
    this.source = this.factory(this.url);
    this.source.onopen = () => this.handlers.onConnection("open");
    // EventSource reconnects on its own; surface the gap to the UI
    this.source.onerror = () => this.handlers.onConnection("lost");
    this.source.onmessage = (ev) => {
      const event = parseEvent(ev.data);
      if (event !== null) {
        this.handlers.onEvent(event);
      }
    };
  }

  stop(): void {
    this.source?.close();
    this.source = null;
  }
}
