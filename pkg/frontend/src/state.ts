/** Session view state: one in-flight request per session, transcript kept
 * byte-identical to the server's, report panel tracking corrections. */

import type { ServiceClient } from "./api.js";
import type { Intent, UiSessionView } from "./types.js";

const MAX_UPLOAD_BYTES = 8 * 1024 * 1024;

export type Listener = (view: UiSessionView) => void;

export class SessionController {
  private view: UiSessionView | null = null;
  private listeners: Listener[] = [];

  constructor(private readonly client: ServiceClient) {}

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  current(): UiSessionView | null {
    return this.view;
  }

  private emit(): void {
    if (this.view) for (const l of this.listeners) l({ ...this.view });
  }

  /** Upload an image and open a session; rejects oversized files client-side. */
  async startSession(image: Blob, filename?: string): Promise<UiSessionView> {
    if (image.size > MAX_UPLOAD_BYTES) {
      throw new Error(`file too large (${image.size} bytes, limit ${MAX_UPLOAD_BYTES})`);
    }
    const created = await this.client.createSession(image, filename);
    this.view = {
      sessionId: created.session_id,
      report: created.report,
      previousReport: null,
      findings: created.findings,
      transcript: [{ role: "assistant", text: created.report, ts: Date.now() / 1000 }],
      pending: false,
      truncated: false,
      error: null,
    };
    await this.syncTranscript();
    return this.view;
  }

  /** Restore a stored session id (e.g. after a reload). */
  async resumeSession(sessionId: string): Promise<UiSessionView> {
    const remote = await this.client.getSession(sessionId);
    this.view = {
      sessionId,
      report: remote.report,
      previousReport: null,
      findings: remote.findings,
      transcript: remote.history,
      pending: false,
      truncated: false,
      error: null,
    };
    this.emit();
    return this.view;
  }

  /** Send one turn; optimistic user bubble, streamed tokens, server resync. */
  async sendTurn(
    text: string,
    intent?: Intent,
    onToken?: (chunk: string) => void,
  ): Promise<UiSessionView> {
    const view = this.require();
    if (view.pending) {
      throw new Error("a request is already in flight for this session");
    }
    view.pending = true;
    view.error = null;
    view.transcript = [
      ...view.transcript,
      { role: "user", text, ts: Date.now() / 1000 },
    ];
    this.emit();
    try {
      const resp = await this.client.sendMessage(view.sessionId, text, intent, onToken);
      view.transcript = [
        ...view.transcript,
        { role: "assistant", text: resp.reply, ts: Date.now() / 1000 },
      ];
      view.truncated = resp.truncated;
      if (resp.report !== undefined) {
        view.previousReport = view.report;
        view.report = resp.report;
      }
    } catch (err) {
      view.error = err instanceof Error ? err.message : String(err);
      // drop the optimistic bubble so a retry does not duplicate it
      view.transcript = view.transcript.slice(0, -1);
      throw err;
    } finally {
      view.pending = false;
      this.emit();
    }
    await this.syncTranscript();
    return view;
  }

  /** Mirror the server state exactly: transcript, report, findings. */
  async syncTranscript(): Promise<void> {
    const view = this.require();
    const remote = await this.client.getSession(view.sessionId);
    view.transcript = remote.history;
    view.report = remote.report;
    view.findings = remote.findings;
    this.emit();
  }

  private require(): UiSessionView {
    if (!this.view) throw new Error("no active session");
    return this.view;
  }
}

/** Quick-action instruction texts (mirroring the trained task prompts). */
export const QUICK_ACTIONS = {
  easyLanguage: "Reformulate this report in simple and understandable language.",
  summarize: "Please summarize this report in one sentence.",
  binaryQa: (label: string) => `Is there any ${label}?`,
  correctionAdd: (label: string) => `The patient also has ${label}, correct the report.`,
  correctionRemove: (label: string) =>
    `There is no ${label}, please adapt the report accordingly.`,
} as const;
