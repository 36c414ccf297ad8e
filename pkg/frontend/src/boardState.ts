// Board view state and its URL round-trip: category, server-side filters,
// client-side column sort. Filters and scores are computed by the backend;
// the state here only decides which query to issue and how to order the
// returned rows for display.

import type { BoardExport, BoardRow } from "./types.js";

export interface SortState {
  column: string | null; // "rank" | "score" | a metric name
  direction: "asc" | "desc";
}

export interface BoardState {
  category: string | null;
  undominated: string[]; // metric names; empty = filter off
  flagFilters: Array<{ flag: string; value: boolean }>;
  sort: SortState;
}

export type BoardAction =
  | { kind: "set-category"; category: string | null }
  | { kind: "set-undominated"; metrics: string[] }
  | { kind: "set-flag"; flag: string; value: boolean }
  | { kind: "remove-flag"; flag: string }
  | { kind: "set-sort"; column: string | null; direction?: "asc" | "desc" }
  | { kind: "clear-filters" };

export function initialBoardState(): BoardState {
  return {
    category: null,
    undominated: [],
    flagFilters: [],
    sort: { column: null, direction: "asc" },
  };
}

export function applyBoardControls(state: BoardState, action: BoardAction): BoardState {
  switch (action.kind) {
    case "set-category":
      return { ...state, category: action.category };
    case "set-undominated":
      return { ...state, undominated: [...action.metrics] };
    case "set-flag": {
      const rest = state.flagFilters.filter((f) => f.flag !== action.flag);
      return { ...state, flagFilters: [...rest, { flag: action.flag, value: action.value }] };
    }
    case "remove-flag":
      return {
        ...state,
        flagFilters: state.flagFilters.filter((f) => f.flag !== action.flag),
      };
    case "set-sort":
      return {
        ...state,
        sort: { column: action.column, direction: action.direction ?? "asc" },
      };
    case "clear-filters":
      return { ...state, undominated: [], flagFilters: [] };
  }
}

/** The filter strings sent to GET .../leaderboard (same grammar the API documents). */
export function apiFilters(state: BoardState): string[] {
  const filters: string[] = [];
  if (state.undominated.length > 0) {
    filters.push(`undominated:${state.undominated.join(",")}`);
  }
  for (const f of state.flagFilters) {
    filters.push(`flag:${f.flag}=${f.value}`);
  }
  return filters;
}

// -- URL round-trip ---------------------------------------------------------

export function stateToQuery(state: BoardState): string {
  const params = new URLSearchParams();
  if (state.category) params.set("category", state.category);
  if (state.undominated.length > 0) params.set("undominated", state.undominated.join(","));
  for (const f of state.flagFilters) params.append("flag", `${f.flag}=${f.value}`);
  if (state.sort.column) params.set("sort", `${state.sort.column}:${state.sort.direction}`);
  return params.toString();
}

export function stateFromQuery(query: string): BoardState {
  const params = new URLSearchParams(query);
  const state = initialBoardState();
  state.category = params.get("category");
  const undominated = params.get("undominated");
  if (undominated) state.undominated = undominated.split(",").filter(Boolean);
  for (const raw of params.getAll("flag")) {
    const [flag, value] = raw.split("=");
    if (flag) state.flagFilters.push({ flag, value: value === "true" });
  }
  const sort = params.get("sort");
  if (sort) {
    const [column, direction] = sort.split(":");
    state.sort = { column, direction: direction === "desc" ? "desc" : "asc" };
  }
  return state;
}

/** Display ordering only; row contents are untouched API data. */
export function orderRows(rows: BoardRow[], sort: SortState): BoardRow[] {
  if (!sort.column) return [...rows];
  const sign = sort.direction === "desc" ? -1 : 1;
  const key = (row: BoardRow): number => {
    if (sort.column === "rank") return row.rank;
    if (sort.column === "score") return row.score;
    return row.aggregates[sort.column!] ?? Number.POSITIVE_INFINITY;
  };
  return [...rows].sort((a, b) => {
    const diff = key(a) - key(b);
    if (diff !== 0) return sign * diff;
    return a.subaccount < b.subaccount ? -1 : 1;
  });
}

export function describeBoard(board: BoardExport): string {
  return `${board.category} (${board.rows.length} rows; filters: ${
    board.filters.length ? board.filters.join(" ") : "none"
  })`;
}
