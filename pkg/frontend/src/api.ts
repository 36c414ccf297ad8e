// Thin typed client for /api/v1. Error bodies are {code, message}; both are
// surfaced on the thrown ApiError.

import type {
  BoardExport,
  CompetitionSummary,
  FeedRow,
  HistoryResponse,
  SubmissionView,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export interface BoardQuery {
  category?: string | null;
  filters?: string[];
}

export class ApiClient {
  private token: string | null = null;

  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (input, init) => globalThis.fetch(input, init),
  ) {}

  setToken(token: string | null): void {
    this.token = token;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    const resp = await this.fetchFn(this.baseUrl + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!resp.ok) {
      let code = "internal_error";
      let message = `HTTP ${resp.status}`;
      try {
        const parsed = (await resp.json()) as { code?: string; message?: string };
        if (parsed.code) code = parsed.code;
        if (parsed.message) message = parsed.message;
      } catch {
        // non-JSON error body; keep the defaults
      }
      throw new ApiError(resp.status, code, message);
    }
    return (await resp.json()) as T;
  }

  login(username: string, password: string) {
    return this.request<{ token: string; user_id: string; role: string }>(
      "POST",
      "/api/v1/auth/login",
      { username, password },
    );
  }

  register(username: string, email: string, password: string) {
    return this.request<{ user_id: string }>("POST", "/api/v1/auth/register", {
      username,
      email,
      password,
    });
  }

  getCompetitions() {
    return this.request<CompetitionSummary[]>("GET", "/api/v1/competitions");
  }

  getCompetition(id: string) {
    return this.request<CompetitionSummary>("GET", `/api/v1/competitions/${id}`);
  }

  getLeaderboard(competitionId: string, query: BoardQuery = {}) {
    const params = new URLSearchParams();
    if (query.category) params.set("category", query.category);
    for (const f of query.filters ?? []) params.append("filter", f);
    const qs = params.toString();
    return this.request<BoardExport>(
      "GET",
      `/api/v1/competitions/${competitionId}/leaderboard${qs ? "?" + qs : ""}`,
    );
  }

  getHistory(competitionId: string, category?: string | null, points = 40) {
    const params = new URLSearchParams({ points: String(points) });
    if (category) params.set("category", category);
    return this.request<HistoryResponse>(
      "GET",
      `/api/v1/competitions/${competitionId}/history?${params}`,
    );
  }

  getSubmission(id: string) {
    return this.request<SubmissionView>("GET", `/api/v1/submissions/${id}`);
  }

  getFeed(competitionId: string, offset = 0, limit = 50) {
    return this.request<{ offset: number; rows: FeedRow[] }>(
      "GET",
      `/api/v1/competitions/${competitionId}/submissions?offset=${offset}&limit=${limit}`,
    );
  }

  startEvaluation(subaccountId: string) {
    return this.request<{ submission_id: string }>(
      "POST",
      `/api/v1/subaccounts/${subaccountId}/evaluations`,
    );
  }

  artifactUrl(submissionId: string, key: string): string {
    return `${this.baseUrl}/api/v1/submissions/${submissionId}/artifacts/${key}`;
  }
}
