/** Typed client for the knowpilot HTTP API.
 *
 * Every method performs exactly one HTTP request; the UI's one-action ==
 * one-call invariant rests on that, and the tests count requests through
 * the injectable fetch.
 */

import type {
  ApiErrorBody,
  ExperienceRecordView,
  KbSearchResult,
  OutlineCommand,
  SectionAction,
  Session
} from "./types.js";

export class ApiError extends Error {
  readonly code: string;
  readonly status: number;
  readonly detail: unknown;

  constructor(status: number, body: ApiErrorBody) {
    super(body.message);
    this.code = body.code;
    this.status = status;
    this.detail = body.detail;
  }
}

export type FetchLike = (
  input: string,
  init?: RequestInit
) => Promise<Response>;

export class ApiClient {
  private readonly baseUrl: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    asText = false
  ): Promise<T> {
    const init: RequestInit = { method, headers: {} };
    if (body !== undefined) {
      init.headers = { "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      let parsed: ApiErrorBody;
      try {
        parsed = (await response.json()) as ApiErrorBody;
      } catch {
        parsed = { code: "unreadable", message: response.statusText, detail: null };
      }
      throw new ApiError(response.status, parsed);
    }
    if (asText) {
      return (await response.text()) as unknown as T;
    }
    return (await response.json()) as T;
  }

  health(): Promise<{ status: string }> {
    return this.request("GET", "/healthz");
  }

  listSessions(): Promise<{ sessions: string[] }> {
    return this.request("GET", "/sessions");
  }

  createSession(): Promise<Session> {
    return this.request("POST", "/sessions");
  }

  getSession(sessionId: string): Promise<Session> {
    return this.request("GET", `/sessions/${sessionId}`);
  }

  submitPriors(sessionId: string, brief: string, useExperience = true): Promise<Session> {
    return this.request("POST", `/sessions/${sessionId}/priors`, {
      brief,
      use_experience: useExperience
    });
  }

  patchConfigFields(
    sessionId: string,
    fields: Record<string, unknown>
  ): Promise<Session> {
    return this.request("PATCH", `/sessions/${sessionId}/config`, { fields });
  }

  patchConfigInstruction(sessionId: string, instruction: string): Promise<Session> {
    return this.request("PATCH", `/sessions/${sessionId}/config`, { instruction });
  }

  generateOutline(sessionId: string): Promise<Session> {
    return this.request("POST", `/sessions/${sessionId}/outline`);
  }

  editOutline(sessionId: string, command: OutlineCommand): Promise<Session> {
    return this.request("PATCH", `/sessions/${sessionId}/outline`, {
      commands: [command]
    });
  }

  retrieveSection(sessionId: string, sectionId: string): Promise<Session> {
    return this.request(
      "POST",
      `/sessions/${sessionId}/sections/${sectionId}/retrieve`
    );
  }

  generateSection(sessionId: string, sectionId: string): Promise<Session> {
    return this.request(
      "POST",
      `/sessions/${sessionId}/sections/${sectionId}/generate`
    );
  }

  submitAction(
    sessionId: string,
    sectionId: string,
    action: SectionAction
  ): Promise<Session> {
    return this.request(
      "POST",
      `/sessions/${sessionId}/sections/${sectionId}/actions`,
      action
    );
  }

  exportMarkdown(sessionId: string): Promise<string> {
    return this.request("GET", `/sessions/${sessionId}/export`, undefined, true);
  }

  ingestDocument(
    title: string,
    body: string,
    sourcePath = ""
  ): Promise<{ doc_id: string; chunk_count: number }> {
    return this.request("POST", "/kb/documents", {
      title,
      body,
      source_path: sourcePath
    });
  }

  searchKb(query: string, k = 5): Promise<{ results: KbSearchResult[] }> {
    const params = new URLSearchParams({ q: query, k: String(k) });
    return this.request("GET", `/kb/search?${params}`);
  }

  browseExperience(
    query = "",
    kind = "",
    limit = 20
  ): Promise<{ records: ExperienceRecordView[] }> {
    const params = new URLSearchParams({
      query,
      kind,
      limit: String(limit)
    });
    return this.request("GET", `/experience?${params}`);
  }
}
