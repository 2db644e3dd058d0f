// Thin fetch wrapper: bearer auth, JSON bodies, errors surfaced verbatim
// with their HTTP status so views can show them.

import type {
  AuditRecordDoc,
  ChatResponse,
  GraphDoc,
  MetricsDoc,
  ParticipantDoc,
  StudyDoc,
  TransitionResponse,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`${status}: ${detail}`);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string,
    private token: string,
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = {
      method,
      headers: {
        Authorization: `Bearer ${this.token}`,
        ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
      },
      ...(body !== undefined ? { body: JSON.stringify(body) } : {}),
    };
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const doc = await response.json();
        if (doc && typeof doc.detail === "string") detail = doc.detail;
      } catch {
        // non-JSON error body: keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    if (response.status === 204) return undefined as T;
    const contentType = response.headers.get("content-type") ?? "";
    if (!contentType.includes("json")) {
      return (await response.text()) as unknown as T;
    }
    return (await response.json()) as T;
  }

  listStudies(): Promise<{ studies: StudyDoc[] }> {
    return this.request("GET", "/studies");
  }

  createStudy(body: Record<string, unknown>): Promise<StudyDoc> {
    return this.request("POST", "/studies", body);
  }

  listParticipants(studyId: string, state?: string): Promise<{ participants: ParticipantDoc[] }> {
    const query = state ? `?state=${encodeURIComponent(state)}` : "";
    return this.request("GET", `/studies/${encodeURIComponent(studyId)}/participants${query}`);
  }

  registerParticipant(studyId: string, body: Record<string, unknown>): Promise<ParticipantDoc> {
    return this.request("POST", `/studies/${encodeURIComponent(studyId)}/participants`, body);
  }

  getParticipant(participantId: string): Promise<ParticipantDoc> {
    return this.request("GET", `/participants/${encodeURIComponent(participantId)}`);
  }

  getAudit(participantId: string, fromSeq?: number): Promise<{ records: AuditRecordDoc[] }> {
    const query = fromSeq !== undefined ? `?from=${fromSeq}` : "";
    return this.request("GET", `/participants/${encodeURIComponent(participantId)}/audit${query}`);
  }

  manualTransition(
    participantId: string,
    targetState: string,
    reason: string,
  ): Promise<TransitionResponse> {
    return this.request("POST", `/participants/${encodeURIComponent(participantId)}/transition`, {
      target_state: targetState,
      reason,
    });
  }

  getMetrics(studyId: string): Promise<MetricsDoc> {
    return this.request("GET", `/studies/${encodeURIComponent(studyId)}/metrics`);
  }

  getGraph(studyId: string): Promise<GraphDoc> {
    return this.request("GET", `/studies/${encodeURIComponent(studyId)}/graph`);
  }

  exportCsvUrl(studyId: string): string {
    return `${this.baseUrl}/studies/${encodeURIComponent(studyId)}/export.csv`;
  }

  chat(sessionId: string, text: string): Promise<ChatResponse> {
    return this.request("POST", `/chat/${encodeURIComponent(sessionId)}`, { text });
  }
}
