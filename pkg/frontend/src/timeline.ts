// Score-history chart: one polyline per subaccount, best-score-so-far over
// the competition timeline. The backend series is a running maximum; the
// view model re-checks that invariant before trusting it.

import type { HistoryResponse, HistorySeries } from "./types.js";

export interface TimelineViewModel {
  category: string;
  grid: string[];
  series: HistorySeries[];
  min: number;
  max: number;
}

export function assertMonotone(series: HistorySeries): void {
  let previous = Number.NEGATIVE_INFINITY;
  for (const point of series.points) {
    if (point.score === null) continue;
    if (point.score < previous) {
      throw new Error(
        `history series for ${series.subaccount} decreases at ${point.t}`,
      );
    }
    previous = point.score;
  }
}

export function buildTimeline(history: HistoryResponse): TimelineViewModel {
  const scores: number[] = [];
  for (const series of history.series) {
    assertMonotone(series);
    for (const point of series.points) {
      if (point.score !== null) scores.push(point.score);
    }
  }
  const min = scores.length ? Math.min(...scores) : 0;
  const max = scores.length ? Math.max(...scores) : 1;
  return {
    category: history.category,
    grid: history.grid,
    series: history.series,
    min,
    max: max === min ? min + 1 : max,
  };
}

const WIDTH = 640;
const HEIGHT = 240;
const SVG_NS = "http://www.w3.org/2000/svg";

export function renderTimeline(container: HTMLElement, vm: TimelineViewModel): void {
  container.innerHTML = "";
  const svg = document.createElementNS(SVG_NS, "svg");
  svg.setAttribute("viewBox", `0 0 ${WIDTH} ${HEIGHT}`);
  svg.setAttribute("class", "timeline");

  const n = vm.grid.length;
  const x = (i: number) => (n <= 1 ? 0 : (i / (n - 1)) * (WIDTH - 40) + 30);
  const y = (score: number) =>
    HEIGHT - 20 - ((score - vm.min) / (vm.max - vm.min)) * (HEIGHT - 40);

  vm.series.forEach((series, idx) => {
    const segments: string[] = [];
    series.points.forEach((point, i) => {
      if (point.score === null) return;
      segments.push(`${x(i)},${y(point.score)}`);
    });
    if (segments.length === 0) return;
    const line = document.createElementNS(SVG_NS, "polyline");
    line.setAttribute("points", segments.join(" "));
    line.setAttribute("fill", "none");
    line.setAttribute("stroke", `hsl(${(idx * 67) % 360} 60% 45%)`);
    line.setAttribute("stroke-width", "2");
    line.setAttribute("data-subaccount", series.subaccount);
    const title = document.createElementNS(SVG_NS, "title");
    title.textContent = series.display_name || series.subaccount;
    line.appendChild(title);
    svg.appendChild(line);
  });
  container.appendChild(svg);

  const legend = document.createElement("div");
  legend.className = "timeline-legend";
  vm.series.forEach((series, idx) => {
    const item = document.createElement("span");
    item.style.color = `hsl(${(idx * 67) % 360} 60% 45%)`;
    item.textContent = series.display_name || series.subaccount;
    legend.appendChild(item);
  });
  container.appendChild(legend);
}
