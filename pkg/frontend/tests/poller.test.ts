// Status poller contract: displays the scripted queued -> fetching ->
// evaluating -> done sequence in order and verifiably stops polling at the
// terminal state. 401 mid-poll redirects to login. Pollers are deduplicated
// per submission id.

import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { activePollerCount, pollSubmissionStatus } from "../src/statusPoller.js";
import type { SubmissionView } from "../src/types.js";

import sequenceFixture from "../fixtures/status_sequence.json";
import { FetchStub } from "./helpers.js";

const sequence = sequenceFixture as unknown as SubmissionView[];

beforeEach(() => {
  vi.useFakeTimers();
});

afterEach(() => {
  vi.useRealTimers();
});

describe("pollSubmissionStatus", () => {
  it("shows the scripted status sequence and stops at terminal", async () => {
    const stub = new FetchStub();
    for (const view of sequence) stub.push(view);
    const seen: string[] = [];
    const handle = pollSubmissionStatus(stub.client(), "sub-own", 3000, {
      onUpdate: (view) => seen.push(view.status),
    });

    for (let i = 0; i < sequence.length; i++) {
      await vi.advanceTimersByTimeAsync(3000);
    }
    expect(seen).toEqual(["queued", "fetching", "evaluating", "done"]);
    expect(handle.active).toBe(false);

    const requestsAtTerminal = stub.calls.length;
    await vi.advanceTimersByTimeAsync(60_000);
    expect(stub.calls.length).toBe(requestsAtTerminal); // polling ceased
  });

  it("redirects to login on 401", async () => {
    const stub = new FetchStub();
    stub.push(sequence[0]);
    stub.push({ code: "unauthorized", message: "token expired" }, 401);
    let authLost = false;
    const seen: string[] = [];
    pollSubmissionStatus(stub.client(), "sub-auth", 1000, {
      onUpdate: (view) => seen.push(view.status),
      onAuthLost: () => {
        authLost = true;
      },
    });
    await vi.advanceTimersByTimeAsync(5000);
    expect(seen).toEqual(["queued"]);
    expect(authLost).toBe(true);
    const calls = stub.calls.length;
    await vi.advanceTimersByTimeAsync(10_000);
    expect(stub.calls.length).toBe(calls);
  });

  it("backs off on server errors and keeps polling", async () => {
    const stub = new FetchStub();
    stub.push(sequence[0]);
    stub.push({ code: "internal_error", message: "storage unavailable" }, 500);
    stub.push(sequence[3]); // recovers straight to done
    const seen: string[] = [];
    const errors: unknown[] = [];
    pollSubmissionStatus(stub.client(), "sub-backoff", 1000, {
      onUpdate: (view) => seen.push(view.status),
      onError: (error) => errors.push(error),
    });
    await vi.advanceTimersByTimeAsync(0); // first poll: queued
    await vi.advanceTimersByTimeAsync(1000); // error -> backoff x2
    expect(errors.length).toBe(1);
    await vi.advanceTimersByTimeAsync(1000); // backoff: not yet polled
    expect(seen).toEqual(["queued"]);
    await vi.advanceTimersByTimeAsync(1000); // 2nd interval elapses: done
    expect(seen).toEqual(["queued", "done"]);
  });

  it("deduplicates concurrent polls per submission id", async () => {
    const stub = new FetchStub();
    for (const view of sequence) stub.push(view);
    const first = pollSubmissionStatus(stub.client(), "sub-dedupe", 1000, {
      onUpdate: () => undefined,
    });
    const second = pollSubmissionStatus(stub.client(), "sub-dedupe", 1000, {
      onUpdate: () => undefined,
    });
    expect(second).toBe(first);
    expect(activePollerCount()).toBeGreaterThan(0);
    first.stop();
    expect(first.active).toBe(false);
  });
});
