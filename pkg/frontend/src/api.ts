/** Typed client for the session service HTTP/SSE surface. */

import { sseStream } from "./sse.js";

export interface GridPayload {
  v: number;
  dims: [number, number, number];
  space?: string;
  count?: number;
  rle: number[];
}

export interface BoxPayload {
  lo: number[];
  hi: number[];
}

export interface ObjectEntry {
  step: number;
  instruction: string;
  coarse: GridPayload;
  box: BoxPayload;
  fine?: GridPayload;
}

export interface SceneSnapshot {
  v: number;
  session: string;
  status: string;
  mode: string;
  n_steps: number;
  objects: ObjectEntry[];
  scene: GridPayload;
}

export interface StepResult {
  v: number;
  step: number;
  instruction: string;
  coarse: GridPayload;
  box: BoxPayload;
  timings: Record<string, number>;
  fine?: GridPayload;
}

export interface SessionInfo {
  v: number;
  session: string;
  mode: string;
  sampler_steps: number;
  seed: number;
}

export interface SessionOptions {
  mode?: "ard" | "ardplus";
  seed?: number;
  steps?: number;
  cfg_text?: number;
  cfg_3d?: number;
}

/** One progress event; `phase` decides which optional fields are set. */
export interface ProgressEvent {
  i: number;
  phase: "start" | "denoise" | "decoded" | "refine" | "done" | "undone" | "error";
  step?: number;
  instruction?: string;
  substep?: "coarse" | "fine";
  k?: number;
  of?: number;
  preview?: GridPayload;
  count?: number;
  n_steps?: number;
  error?: string;
  unknown?: string[];
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
    readonly body: Record<string, unknown> = {},
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const res = await fetch(url, init);
  const text = await res.text();
  let body: Record<string, unknown> = {};
  try {
    body = text ? JSON.parse(text) : {};
  } catch {
    // non-JSON error body, keep text in the message below
  }
  if (!res.ok) {
    const msg = typeof body.error === "string" ? body.error : text || res.statusText;
    throw new ApiError(res.status, msg, body);
  }
  return body as T;
}

function post(payload: unknown): RequestInit {
  return {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(payload ?? {}),
  };
}

export class Ard3dClient {
  /** `base` is the service origin or a same-origin proxy prefix, no
   * trailing slash (e.g. "http://127.0.0.1:8000" or "/api"). */
  constructor(readonly base: string) {}

  health(): Promise<{ v: number; status: string; sessions: number }> {
    return request(`${this.base}/healthz`);
  }

  createSession(opts: SessionOptions = {}): Promise<SessionInfo> {
    return request(`${this.base}/sessions`, post(opts));
  }

  addInstruction(sid: string, text: string, seed?: number): Promise<StepResult> {
    const body: Record<string, unknown> = { text };
    if (seed !== undefined) body.seed = seed;
    return request(`${this.base}/sessions/${sid}/instructions`, post(body));
  }

  scene(sid: string): Promise<SceneSnapshot> {
    return request(`${this.base}/sessions/${sid}/scene`);
  }

  undo(sid: string): Promise<SceneSnapshot> {
    return request(`${this.base}/sessions/${sid}/undo`, post({}));
  }

  /** Live event subscription; replays the last `replay` recorded events
   * first, then follows until aborted. */
  events(sid: string, replay = 0, signal?: AbortSignal): AsyncGenerator<ProgressEvent> {
    const url = `${this.base}/sessions/${sid}/events?replay=${replay}&follow=1`;
    return sseStream<ProgressEvent>(url, signal);
  }

  /** Fetch the recorded event backlog and close (no follow). */
  async fetchEvents(sid: string, replay = 1_000_000): Promise<ProgressEvent[]> {
    const url = `${this.base}/sessions/${sid}/events?replay=${replay}&follow=0`;
    const out: ProgressEvent[] = [];
    for await (const ev of sseStream<ProgressEvent>(url)) out.push(ev);
    return out;
  }
}
