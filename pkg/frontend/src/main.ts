// Page wiring: competition picker, leaderboard with category/filter/sort
// controls (shareable via the URL query string, back/forward restores prior
// views), score history chart, the all-submissions feed, and live status
// for the viewer's own submissions.

import { ApiClient, ApiError } from "./api.js";
import {
  applyBoardControls,
  apiFilters,
  initialBoardState,
  stateFromQuery,
  stateToQuery,
  type BoardAction,
  type BoardState,
} from "./boardState.js";
import { renderBoard } from "./boardView.js";
import { renderStatusBadge, renderSubmissionRow } from "./submissionRow.js";
import { pollSubmissionStatus } from "./statusPoller.js";
import { buildTimeline, renderTimeline } from "./timeline.js";
import type { CompetitionSummary } from "./types.js";

const client = new ApiClient("");

function toast(message: string, tone: "info" | "error" = "info"): void {
  const host = document.getElementById("toasts");
  if (!host) return;
  const node = document.createElement("div");
  node.className = `toast toast-${tone}`;
  node.textContent = message;
  host.appendChild(node);
  setTimeout(() => node.remove(), 6000);
}

function onApiError(error: unknown): void {
  if (error instanceof ApiError) {
    if (error.status === 401) {
      toast("Session expired; please log in again", "error");
      location.hash = "#login";
      return;
    }
    toast(`${error.code}: ${error.message}`, "error");
  } else {
    toast(String(error), "error");
  }
}

class BoardPage {
  private state: BoardState = initialBoardState();

  constructor(
    private competition: CompetitionSummary,
    private root: HTMLElement,
  ) {}

  async mount(fromQuery: string): Promise<void> {
    this.state = fromQuery ? stateFromQuery(fromQuery) : initialBoardState();
    this.renderControls();
    await this.refresh(false);
    window.addEventListener("popstate", () => {
      this.state = stateFromQuery(location.search.slice(1));
      this.renderControls();
      void this.refresh(false);
    });
  }

  private controls(): HTMLElement {
    return this.root.querySelector("#board-controls") as HTMLElement;
  }

  private async dispatch(action: BoardAction): Promise<void> {
    const previous = this.state;
    this.state = applyBoardControls(this.state, action);
    try {
      await this.refresh(true);
    } catch (error) {
      this.state = previous; // keep previous rows on a rejected filter
      this.renderControls();
      onApiError(error);
    }
  }

  private renderControls(): void {
    const host = this.controls();
    host.innerHTML = "";

    const categorySelect = document.createElement("select");
    for (const category of this.competition.categories) {
      const option = document.createElement("option");
      option.value = category.category_name;
      option.textContent = category.category_name;
      if (
        category.category_name === this.state.category ||
        (!this.state.category && category === this.competition.categories[0])
      ) {
        option.selected = true;
      }
      categorySelect.appendChild(option);
    }
    categorySelect.addEventListener("change", () => {
      void this.dispatch({ kind: "set-category", category: categorySelect.value });
    });
    host.appendChild(categorySelect);

    const undominated = document.createElement("label");
    const checkbox = document.createElement("input");
    checkbox.type = "checkbox";
    checkbox.checked = this.state.undominated.length > 0;
    checkbox.addEventListener("change", () => {
      const metrics = checkbox.checked
        ? this.competition.metric_schema.map((m) => m.metric_name)
        : [];
      void this.dispatch({ kind: "set-undominated", metrics });
    });
    undominated.appendChild(checkbox);
    undominated.appendChild(document.createTextNode(" undominated only"));
    host.appendChild(undominated);

    const clear = document.createElement("button");
    clear.textContent = "clear filters";
    clear.addEventListener("click", () => void this.dispatch({ kind: "clear-filters" }));
    host.appendChild(clear);
  }

  private async refresh(pushHistory: boolean): Promise<void> {
    const board = await client.getLeaderboard(this.competition.competition_id, {
      category: this.state.category,
      filters: apiFilters(this.state),
    });
    const query = stateToQuery(this.state);
    if (pushHistory) {
      history.pushState(null, "", query ? `?${query}` : location.pathname);
    }
    const table = this.root.querySelector("#board") as HTMLElement;
    renderBoard(table, this.competition, board, this.state, (column) => {
      const direction =
        this.state.sort.column === column && this.state.sort.direction === "asc"
          ? "desc"
          : "asc";
      void this.dispatch({ kind: "set-sort", column, direction });
    });

    const history_host = this.root.querySelector("#timeline") as HTMLElement;
    try {
      const history_data = await client.getHistory(
        this.competition.competition_id,
        this.state.category,
      );
      renderTimeline(history_host, buildTimeline(history_data));
    } catch (error) {
      history_host.textContent = "history unavailable";
    }
  }
}

async function renderFeed(competitionId: string, host: HTMLElement): Promise<void> {
  try {
    const feed = await client.getFeed(competitionId);
    host.innerHTML = "";
    for (const row of feed.rows) {
      const div = document.createElement("div");
      div.className = "feed-row";
      div.appendChild(renderStatusBadge(row.status));
      div.appendChild(document.createTextNode(` ${row.display_name} — ${row.submit_time}`));
      host.appendChild(div);
    }
  } catch (error) {
    host.textContent = "log in to see the all-submissions feed";
  }
}

export async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) return;
  try {
    const competitions = await client.getCompetitions();
    if (competitions.length === 0) {
      root.textContent = "No competitions configured.";
      return;
    }
    const params = new URLSearchParams(location.search);
    const competition =
      competitions.find((c) => c.competition_id === params.get("competition")) ??
      competitions[0];
    (root.querySelector("#competition-name") as HTMLElement).textContent = competition.name;
    const page = new BoardPage(competition, root);
    await page.mount(location.search.slice(1));
    await renderFeed(
      competition.competition_id,
      root.querySelector("#feed") as HTMLElement,
    );
  } catch (error) {
    onApiError(error);
  }
}

export function watchSubmission(submissionId: string, host: HTMLElement): void {
  pollSubmissionStatus(client, submissionId, 3000, {
    onUpdate: (view) => {
      host.innerHTML = "";
      host.appendChild(renderSubmissionRow(view, (key) => client.artifactUrl(view.submission_id, key)));
    },
    onAuthLost: () => {
      toast("Session expired; please log in again", "error");
      location.hash = "#login";
    },
    onError: (error) => toast(String(error), "error"),
  });
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  void boot();
}
