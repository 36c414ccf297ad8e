// Shapes of /api/v1 payloads the UI consumes. The UI never computes scores,
// filters or redaction itself: everything rendered comes verbatim from
// these responses.

export interface MetricSpec {
  metric_name: string;
  direction: "minimize" | "maximize";
  unit: string;
  aggregation: "sum" | "mean" | "max" | "count_success";
}

export interface CategoryRef {
  category_name: string;
  tie_break: string[];
}

export interface CompetitionSummary {
  competition_id: string;
  name: string;
  start_time: string;
  end_time: string;
  visibility_policy: "gppc_style" | "lorr_style";
  metric_schema: MetricSpec[];
  categories: CategoryRef[];
  debug_instances: string[];
  hidden_instances: string[];
}

export interface BoardRow {
  rank: number;
  subaccount: string;
  display_name: string;
  score: number;
  aggregates: Record<string, number>;
  flags: Record<string, boolean>;
}

export interface BoardExport {
  category: string;
  filters: string[];
  rows: BoardRow[];
}

export type SubmissionStatus =
  | "queued"
  | "fetching"
  | "evaluating"
  | "done"
  | "failed"
  | "timed_out"
  | "killed";

export const TERMINAL_STATUSES: ReadonlySet<SubmissionStatus> = new Set([
  "done",
  "failed",
  "timed_out",
  "killed",
]);

export interface StageOutcomeView {
  stage_name: string;
  instance_scope: "debug" | "hidden" | "n/a";
  exit_kind: string;
  wall_time: number;
  peak_memory: number;
  instance_id: string | null;
  stdout_ref: string | null;
  stderr_ref: string | null;
  artifact_refs: string[];
}

export interface MetricRecordView {
  instance_id: string;
  metric_name: string;
  value: number;
  scope: "debug" | "hidden";
}

export interface SubmissionView {
  submission_id: string;
  subaccount_id: string;
  competition_id: string;
  submit_time: string;
  status: SubmissionStatus;
  commit_hash: string | null;
  declared_packages: string[] | null;
  server_log: string | null;
  stage_outcomes: StageOutcomeView[];
  metric_records: MetricRecordView[];
  viewer: "organiser" | "owner" | "other";
}

export interface FeedRow {
  submission_id: string;
  display_name: string;
  submit_time: string;
  status: SubmissionStatus;
}

export interface HistoryPoint {
  t: string;
  score: number | null;
}

export interface HistorySeries {
  subaccount: string;
  display_name: string;
  points: HistoryPoint[];
}

export interface HistoryResponse {
  category: string;
  grid: string[];
  series: HistorySeries[];
}
