// Leaderboard table rendering. Column set equals the competition's metric
// schema exactly; every cell value is taken verbatim from the board export.

import type { BoardState } from "./boardState.js";
import { orderRows } from "./boardState.js";
import type { BoardExport, CompetitionSummary } from "./types.js";

export function boardColumns(competition: CompetitionSummary): string[] {
  return competition.metric_schema.map((m) => m.metric_name);
}

export function renderBoard(
  container: HTMLElement,
  competition: CompetitionSummary,
  board: BoardExport,
  state: BoardState,
  onSort?: (column: string) => void,
): void {
  const metrics = boardColumns(competition);
  container.innerHTML = "";

  const caption = document.createElement("div");
  caption.className = "board-caption";
  caption.dataset.category = board.category;
  caption.textContent =
    board.filters.length > 0
      ? `${board.category} — filters: ${board.filters.join(", ")}`
      : board.category;
  container.appendChild(caption);

  const table = document.createElement("table");
  table.className = "board";
  const head = table.createTHead().insertRow();
  for (const name of ["rank", "team", "score", ...metrics]) {
    const th = document.createElement("th");
    th.textContent = name;
    th.dataset.column = name;
    if (onSort && name !== "team") {
      th.classList.add("sortable");
      th.addEventListener("click", () => onSort(name));
    }
    head.appendChild(th);
  }

  const body = table.createTBody();
  for (const row of orderRows(board.rows, state.sort)) {
    const tr = body.insertRow();
    tr.dataset.subaccount = row.subaccount;
    tr.insertCell().textContent = String(row.rank);
    const team = tr.insertCell();
    team.textContent = row.display_name || row.subaccount;
    team.dataset.flags = Object.entries(row.flags)
      .filter(([, v]) => v)
      .map(([k]) => k)
      .join(" ");
    tr.insertCell().textContent = String(row.score);
    for (const metric of metrics) {
      const cell = tr.insertCell();
      cell.dataset.metric = metric;
      const value = row.aggregates[metric];
      cell.textContent = value === undefined ? "" : String(value);
    }
  }
  container.appendChild(table);

  if (board.rows.length === 0) {
    const empty = document.createElement("div");
    empty.className = "board-empty";
    empty.textContent = "No entries yet";
    container.appendChild(empty);
  }
}
