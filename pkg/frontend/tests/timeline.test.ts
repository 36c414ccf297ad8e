// Timeline view model: series must mirror the backend's running-max
// (monotone non-decreasing); rendering draws one polyline per subaccount.

import { describe, expect, it } from "vitest";

import { assertMonotone, buildTimeline, renderTimeline } from "../src/timeline.js";
import type { HistoryResponse } from "../src/types.js";

import historyFixture from "../fixtures/history_overall.json";

const history = historyFixture as unknown as HistoryResponse;

describe("timeline", () => {
  it("fixture series are monotone and build a view model", () => {
    const vm = buildTimeline(history);
    expect(vm.category).toBe(history.category);
    expect(vm.grid.length).toBe(history.grid.length);
    expect(vm.max).toBeGreaterThan(vm.min - 1);
  });

  it("a decreasing series is rejected", () => {
    expect(() =>
      assertMonotone({
        subaccount: "x",
        display_name: "X",
        points: [
          { t: "2026-01-01T00:00:00+00:00", score: 5 },
          { t: "2026-01-02T00:00:00+00:00", score: 3 },
        ],
      }),
    ).toThrow(/decreases/);
  });

  it("gaps (null before first submission) are allowed", () => {
    assertMonotone({
      subaccount: "x",
      display_name: "X",
      points: [
        { t: "t0", score: null },
        { t: "t1", score: 1 },
        { t: "t2", score: 1 },
      ],
    });
  });

  it("renders one polyline per subaccount with data", () => {
    document.body.innerHTML = '<div id="chart"></div>';
    const host = document.getElementById("chart") as HTMLElement;
    renderTimeline(host, buildTimeline(history));
    const lines = host.querySelectorAll("polyline");
    const withData = history.series.filter((s) =>
      s.points.some((p) => p.score !== null),
    );
    expect(lines.length).toBe(withData.length);
  });
});
