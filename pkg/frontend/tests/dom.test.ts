// @vitest-environment happy-dom
/** Rendering contracts: the board displays exactly what the server provided,
 * in the server's order, and surfaces violations next to the offending row. */

import { describe, expect, it } from "vitest";

import type { ClusterProposal, IterationRecord, SessionSummary } from "../src/api.js";
import { ApiClient } from "../src/api.js";
import { SessionStore } from "../src/state.js";
import { renderBoard, renderClusterCard, renderHistoryChart } from "../src/ui.js";

function fakeStore(): SessionStore {
  const store = new SessionStore(new ApiClient("http://unused"), "s1");
  store.summary = {
    session_id: "s1",
    corpus_id: "c1",
    status: "awaiting_feedback",
    iteration: 3,
    k: 4,
    counts: { labeled: 10, unlabeled: 90, total: 100 },
    labeled_fraction: 0.1,
    intents: [{ name: "alpha", count: 6 }, { name: "beta", count: 4 }],
    termination: { done: false, reason: "in progress" },
  } satisfies SessionSummary;
  store.proposals = [proposal(0, [0.99, 0.9, 0.85]), proposal(1, [0.95, 0.8])];
  store.history = [
    record(1, 0.05, 0.5),
    record(2, 0.08, 0.7),
  ];
  return store;
}

function proposal(clusterId: number, confidences: number[]): ClusterProposal {
  return {
    cluster_id: clusterId,
    size: confidences.length + 2,
    samples: confidences.map((c, i) => ({
      id: `u${clusterId}-${i}`,
      text: `sample ${clusterId}-${i}`,
      confidence: c,
    })),
    points_2d: confidences.map((_, i) => ({ id: `u${clusterId}-${i}`, x: i, y: -i })),
  };
}

function record(iteration: number, labeled: number, acc: number): IterationRecord {
  return {
    iteration,
    k: 4,
    intents: 2,
    labeled_fraction: labeled,
    metrics: { acc, ari: acc - 0.1, nmi: acc + 0.1 },
  };
}

describe("cluster card", () => {
  it("renders samples exactly in the server's confidence order", () => {
    const store = fakeStore();
    const card = renderClusterCard(store, store.proposals[0]!);
    const rows = [...card.querySelectorAll(".sample .text")].map((n) => n.textContent);
    expect(rows).toEqual(["sample 0-0", "sample 0-1", "sample 0-2"]);
    const confs = [...card.querySelectorAll(".confidence")].map((n) => n.textContent);
    expect(confs).toEqual(["0.990", "0.900", "0.850"]);
  });

  it("checkbox toggles update the store", () => {
    const store = fakeStore();
    const card = renderClusterCard(store, store.proposals[0]!);
    const box = card.querySelector("input[type=checkbox][data-sample='u0-1']") as HTMLInputElement;
    box.dispatchEvent(new Event("change"));
    expect(store.selections.get(0)?.has("u0-1")).toBe(true);
  });

  it("marks violations next to the offending sample", () => {
    const store = fakeStore();
    store.violations = [{ code: "id_not_unlabeled", cluster_id: 0, id: "u0-1" }];
    const card = renderClusterCard(store, store.proposals[0]!);
    const flagged = card.querySelectorAll("[data-testid=violation]");
    expect(flagged.length).toBe(1);
    expect(flagged[0]!.textContent).toContain("id_not_unlabeled");
  });
});

describe("board", () => {
  it("shows fetched counts and intent autocomplete options verbatim", () => {
    const store = fakeStore();
    const root = document.createElement("div");
    renderBoard(root, store);
    expect(root.querySelector("[data-testid=iteration]")!.textContent).toBe("iteration 3");
    expect(root.querySelector("[data-testid=labeled]")!.textContent).toContain("10/100");
    const options = [...root.querySelectorAll("#intent-names option")].map(
      (o) => o.getAttribute("value"),
    );
    expect(options).toEqual(["alpha", "beta"]);
  });

  it("disables iterate while training and shows the spinner", () => {
    const store = fakeStore();
    store.training = true;
    const root = document.createElement("div");
    renderBoard(root, store);
    const button = root.querySelector("[data-testid=iterate]") as HTMLButtonElement;
    expect(button.disabled).toBe(true);
    expect(root.querySelector("[data-testid=spinner]")).not.toBeNull();
  });

  it("shows a retry banner on failure state", () => {
    const store = fakeStore();
    store.banner = "network failure: boom; retry";
    const root = document.createElement("div");
    renderBoard(root, store);
    expect(root.querySelector("[data-testid=banner]")!.textContent).toContain("network failure");
    expect(root.querySelector("[data-testid=retry]")).not.toBeNull();
  });
});

describe("history chart", () => {
  it("plots one point per iteration and reports the latest row", () => {
    const chart = renderHistoryChart(fakeStore().history);
    const acc = chart.querySelector("polyline[data-series=acc]")!;
    expect(acc.getAttribute("points")!.split(" ").length).toBe(2);
    expect(chart.querySelector("[data-testid=history-last]")!.textContent)
      .toContain("iteration 2");
  });

  it("handles an empty history", () => {
    const chart = renderHistoryChart([]);
    expect(chart.textContent).toContain("no iterations yet");
  });
});
