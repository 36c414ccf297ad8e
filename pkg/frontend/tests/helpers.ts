// Shared test plumbing: an ApiClient whose fetch is a scripted stub, so
// every test renders from recorded fixtures alone (no backend).

import { ApiClient, type FetchLike } from "../src/api.js";

export interface StubCall {
  url: string;
  init?: RequestInit;
}

export class FetchStub {
  calls: StubCall[] = [];
  private routes: Array<{
    match: (url: string) => boolean;
    respond: () => { status?: number; body: unknown };
  }> = [];
  private queue: Array<{ status?: number; body: unknown }> = [];

  route(match: (url: string) => boolean, body: unknown, status = 200): void {
    this.routes.push({ match, respond: () => ({ status, body }) });
  }

  push(body: unknown, status = 200): void {
    this.queue.push({ status, body });
  }

  fetch: FetchLike = async (url, init) => {
    this.calls.push({ url, init });
    let hit = this.routes.find((r) => r.match(url))?.respond();
    if (!hit && this.queue.length > 0) hit = this.queue.shift();
    if (!hit) hit = { status: 404, body: { code: "not_found", message: url } };
    const status = hit.status ?? 200;
    return {
      ok: status >= 200 && status < 300,
      status,
      json: async () => hit!.body,
    } as unknown as Response;
  };

  client(): ApiClient {
    return new ApiClient("", this.fetch);
  }
}
