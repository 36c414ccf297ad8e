// Live submission status: poll GET /submissions/{id} at a fixed interval
// until the status is terminal, then stop. 401 hands control to the login
// redirect; transient failures back off and keep trying. Concurrent polls
// for the same submission are deduplicated.

import { ApiClient, ApiError } from "./api.js";
import { TERMINAL_STATUSES } from "./types.js";
import type { SubmissionView } from "./types.js";

export interface PollerCallbacks {
  onUpdate: (view: SubmissionView) => void;
  onAuthLost?: () => void;
  onError?: (error: ApiError | Error) => void;
}

export interface PollerHandle {
  stop: () => void;
  readonly active: boolean;
}

const MAX_BACKOFF_FACTOR = 8;

const activePollers = new Map<string, PollerHandle>();

export function pollSubmissionStatus(
  client: ApiClient,
  submissionId: string,
  intervalMs: number,
  callbacks: PollerCallbacks,
): PollerHandle {
  const existing = activePollers.get(submissionId);
  if (existing && existing.active) return existing;

  let stopped = false;
  let timer: ReturnType<typeof setTimeout> | null = null;
  let backoff = 1;

  const handle: PollerHandle = {
    stop() {
      stopped = true;
      if (timer !== null) clearTimeout(timer);
      activePollers.delete(submissionId);
    },
    get active() {
      return !stopped;
    },
  };
  activePollers.set(submissionId, handle);

  const tick = async (): Promise<void> => {
    if (stopped) return;
    try {
      const view = await client.getSubmission(submissionId);
      backoff = 1;
      callbacks.onUpdate(view);
      if (TERMINAL_STATUSES.has(view.status)) {
        handle.stop();
        return;
      }
    } catch (error) {
      if (error instanceof ApiError && error.status === 401) {
        handle.stop();
        callbacks.onAuthLost?.();
        return;
      }
      callbacks.onError?.(error as Error);
      backoff = Math.min(backoff * 2, MAX_BACKOFF_FACTOR);
    }
    if (!stopped) {
      timer = setTimeout(tick, intervalMs * backoff);
    }
  };

  timer = setTimeout(tick, 0);
  return handle;
}

/** Test hook: how many submissions currently have a live poller. */
export function activePollerCount(): number {
  return activePollers.size;
}
