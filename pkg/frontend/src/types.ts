/** Shared types mirroring the service wire format. */

export type FindingStatus = "pos" | "neg" | "unc" | "blank";

export interface FindingsMap {
  [label: string]: FindingStatus;
}

export interface TranscriptEntry {
  role: "user" | "assistant";
  text: string;
  ts: number;
}

export interface CreateSessionResponse {
  session_id: string;
  report: string;
  findings: FindingsMap;
  digests: Record<string, string>;
}

export interface MessageResponse {
  reply: string;
  report?: string;
  truncated: boolean;
  digests: Record<string, string>;
}

export interface SessionTranscript {
  session_id: string;
  study_id: string | null;
  report: string;
  findings: FindingsMap;
  history: TranscriptEntry[];
  digests: Record<string, string>;
}

export type Intent = "correction" | undefined;

/** Client-side view of one session. */
export interface UiSessionView {
  sessionId: string;
  report: string;
  previousReport: string | null;
  findings: FindingsMap;
  transcript: TranscriptEntry[];
  pending: boolean;
  truncated: boolean;
  error: string | null;
}
