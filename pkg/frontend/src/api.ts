/** Typed client for the dialog service HTTP API.
 *
 * The fetch implementation is injectable so tests can run against an
 * in-process stub server. Streaming replies arrive as SSE "data:" chunks
 * whose concatenation is byte-equal to the non-streaming reply.
 */

import type {
  CreateSessionResponse,
  Intent,
  MessageResponse,
  SessionTranscript,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

async function errorFrom(resp: Response): Promise<ApiError> {
  let detail = resp.statusText;
  try {
    const body = (await resp.json()) as { detail?: string };
    if (body.detail) detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiError(resp.status, detail);
}

export class ServiceClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}${path}`;
  }

  async createSession(image: Blob, filename = "upload.png"): Promise<CreateSessionResponse> {
    const form = new FormData();
    form.append("image", image, filename);
    const resp = await this.fetchImpl(this.url("/v1/sessions"), {
      method: "POST",
      body: form,
    });
    if (!resp.ok) throw await errorFrom(resp);
    return (await resp.json()) as CreateSessionResponse;
  }

  async createSessionFromStudy(studyId: string): Promise<CreateSessionResponse> {
    const resp = await this.fetchImpl(this.url("/v1/sessions"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ study_id: studyId }),
    });
    if (!resp.ok) throw await errorFrom(resp);
    return (await resp.json()) as CreateSessionResponse;
  }

  async sendMessage(
    sessionId: string,
    text: string,
    intent?: Intent,
    onToken?: (chunk: string) => void,
  ): Promise<MessageResponse> {
    const stream = onToken !== undefined;
    const path = `/v1/sessions/${sessionId}/messages${stream ? "?stream=true" : ""}`;
    const resp = await this.fetchImpl(this.url(path), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(intent ? { text, intent } : { text }),
    });
    if (!resp.ok) throw await errorFrom(resp);
    if (!stream || !resp.headers.get("content-type")?.startsWith("text/event-stream")) {
      return (await resp.json()) as MessageResponse;
    }
    return this.consumeStream(resp, onToken);
  }

  private async consumeStream(
    resp: Response,
    onToken: (chunk: string) => void,
  ): Promise<MessageResponse> {
    const raw = await readBody(resp);
    let reply = "";
    let tail: Omit<MessageResponse, "reply"> | null = null;
    let pendingEvent: string | null = null;
    for (const line of raw.split("\n")) {
      if (line.startsWith("event: ")) {
        pendingEvent = line.slice("event: ".length).trim();
        continue;
      }
      if (!line.startsWith("data: ")) continue;
      const payload = line.slice("data: ".length);
      if (pendingEvent === "done") {
        tail = JSON.parse(payload) as Omit<MessageResponse, "reply">;
        pendingEvent = null;
        continue;
      }
      const chunk = JSON.parse(payload) as string;
      reply += chunk;
      onToken(chunk);
    }
    if (tail === null) throw new ApiError(502, "stream ended without a done event");
    return { reply, ...tail };
  }

  async getSession(sessionId: string): Promise<SessionTranscript> {
    const resp = await this.fetchImpl(this.url(`/v1/sessions/${sessionId}`));
    if (!resp.ok) throw await errorFrom(resp);
    return (await resp.json()) as SessionTranscript;
  }

  async health(): Promise<{ status: string; models_loaded: boolean }> {
    const resp = await this.fetchImpl(this.url("/v1/health"));
    if (!resp.ok) throw await errorFrom(resp);
    return (await resp.json()) as { status: string; models_loaded: boolean };
  }
}

async function readBody(resp: Response): Promise<string> {
  if (resp.body && typeof resp.body.getReader === "function") {
    const reader = resp.body.getReader();
    const decoder = new TextDecoder();
    let out = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      out += decoder.decode(value, { stream: true });
    }
    return out + decoder.decode();
  }
  return resp.text();
}
