// One submission as a display row: status badge, time, log links. The badge
// mapping is total over the 7 lifecycle statuses. Hidden-scope links are
// never rendered for participant views (the backend strips them anyway;
// this is the UI's own guarantee for organiser-shaped data it may cache).

import type { SubmissionStatus, SubmissionView } from "./types.js";

export interface BadgeSpec {
  label: string;
  tone: "pending" | "running" | "success" | "failure";
  reason?: string;
}

export const STATUS_BADGES: Record<SubmissionStatus, BadgeSpec> = {
  queued: { label: "Queued", tone: "pending" },
  fetching: { label: "Fetching", tone: "running" },
  evaluating: { label: "Evaluating", tone: "running" },
  done: { label: "Done", tone: "success" },
  failed: { label: "Failed", tone: "failure", reason: "stage failed" },
  timed_out: { label: "Timed out", tone: "failure", reason: "time limit exceeded" },
  killed: { label: "Killed", tone: "failure", reason: "resource limit exceeded" },
};

export function renderStatusBadge(status: SubmissionStatus): HTMLElement {
  const spec = STATUS_BADGES[status];
  const badge = document.createElement("span");
  badge.className = `badge badge-${spec.tone}`;
  badge.dataset.status = status;
  badge.textContent = spec.label;
  if (spec.reason) badge.title = spec.reason;
  return badge;
}

export function renderSubmissionRow(
  view: SubmissionView,
  artifactUrl: (key: string) => string,
): HTMLElement {
  const row = document.createElement("div");
  row.className = "submission-row";
  row.dataset.submissionId = view.submission_id;

  row.appendChild(renderStatusBadge(view.status));

  const time = document.createElement("span");
  time.className = "submit-time";
  time.textContent = view.submit_time;
  row.appendChild(time);

  if (view.commit_hash) {
    const commit = document.createElement("code");
    commit.className = "commit";
    commit.textContent = view.commit_hash.slice(0, 10);
    row.appendChild(commit);
  }

  const links = document.createElement("span");
  links.className = "log-links";
  for (const outcome of view.stage_outcomes) {
    const participantView = view.viewer !== "organiser";
    if (participantView && outcome.instance_scope === "hidden") continue;
    for (const [name, key] of [
      ["stdout", outcome.stdout_ref],
      ["stderr", outcome.stderr_ref],
    ] as const) {
      if (!key) continue;
      const a = document.createElement("a");
      a.href = artifactUrl(key);
      a.textContent = `${outcome.stage_name}/${outcome.instance_id ?? "-"}:${name}`;
      a.dataset.scope = outcome.instance_scope;
      links.appendChild(a);
    }
  }
  row.appendChild(links);
  return row;
}
