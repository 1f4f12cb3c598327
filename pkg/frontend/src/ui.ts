/** DOM rendering for the cluster review board. Every number shown here was
 * fetched from the service; the only client-side math is the scatter's
 * pan/zoom transform. */

import { ClusterProposal, IterationRecord, SessionSummary } from "./api.js";
import { SessionStore } from "./state.js";

const CLUSTER_COLORS = [
  "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
  "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac", "#1f77b4", "#ff7f0e",
  "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

export function clusterColor(clusterId: number): string {
  return CLUSTER_COLORS[clusterId % CLUSTER_COLORS.length]!;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") {
      node.className = value;
    } else {
      node.setAttribute(key, value);
    }
  }
  node.append(...children);
  return node;
}

function svgEl(tag: string, attrs: Record<string, string>): SVGElement {
  const node = document.createElementNS("http://www.w3.org/2000/svg", tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  return node;
}

export function renderSummary(summary: SessionSummary): HTMLElement {
  const intents = summary.intents
    .map((entry) => `${entry.name} (${entry.count})`)
    .join(", ");
  return el(
    "div",
    { class: "summary", "data-testid": "summary" },
    el("span", { class: "stat", "data-testid": "iteration" }, `iteration ${summary.iteration}`),
    el("span", { class: "stat", "data-testid": "k" }, `K = ${summary.k}`),
    el("span", { class: "stat" }, `status: ${summary.status}`),
    el(
      "span",
      { class: "stat", "data-testid": "labeled" },
      `labeled ${summary.counts.labeled}/${summary.counts.total} ` +
        `(${(100 * summary.labeled_fraction).toFixed(1)}%)`,
    ),
    el("span", { class: "stat intents" }, intents ? `intents: ${intents}` : "no intents yet"),
  );
}

export function renderClusterCard(store: SessionStore, proposal: ClusterProposal): HTMLElement {
  const cid = proposal.cluster_id;
  const selected = store.selections.get(cid) ?? new Set<string>();
  const merged = store.merges.some((group) => group.includes(cid));

  const list = el("ol", { class: "samples", "data-testid": `samples-${cid}` });
  // server order is confidence-descending; render it verbatim
  for (const sample of proposal.samples) {
    const checkbox = el("input", {
      type: "checkbox",
      "data-sample": sample.id,
    }) as HTMLInputElement;
    checkbox.checked = selected.has(sample.id);
    checkbox.addEventListener("change", () => store.toggleSample(cid, sample.id));
    const violation = store.violations.find((v) => v.id === sample.id);
    const item = el(
      "li",
      { class: "sample" },
      el("label", {}, checkbox, el("span", { class: "text" }, sample.text),
        el("span", { class: "confidence" }, sample.confidence.toFixed(3))),
    );
    if (violation) {
      item.append(el("span", { class: "violation", "data-testid": "violation" },
                     ` ${violation.code}`));
    }
    list.append(item);
  }

  const intentInput = el("input", {
    type: "text",
    list: "intent-names",
    placeholder: "intent name",
    "data-testid": `intent-${cid}`,
  }) as HTMLInputElement;
  intentInput.value = store.intentNames.get(cid) ?? "";
  intentInput.addEventListener("input", () => store.setIntent(cid, intentInput.value));

  const mergeBox = el("input", { type: "checkbox", "data-testid": `merge-${cid}` }) as HTMLInputElement;
  mergeBox.checked = store.mergeMarks.has(cid);
  mergeBox.addEventListener("change", () => store.toggleMergeMark(cid));

  const clusterViolations = store
    .violationsFor(cid)
    .filter((v) => !v.id)
    .map((v) => el("div", { class: "violation" }, v.code));

  return el(
    "section",
    {
      class: "cluster-card" + (merged ? " merged" : ""),
      "data-testid": `cluster-${cid}`,
      style: `border-top: 4px solid ${clusterColor(cid)}`,
    },
    el("header", {},
       el("strong", {}, `cluster ${cid}`),
       el("span", { class: "size" }, ` ${proposal.size} members, ${proposal.samples.length} confident`),
       merged ? el("span", { class: "chip" }, "merged") : ""),
    el("div", { class: "intent-row" },
       intentInput,
       el("label", { class: "merge-label" }, mergeBox, " merge")),
    ...clusterViolations,
    list,
  );
}

export function renderScatter(proposals: ClusterProposal[]): HTMLElement {
  const wrap = el("div", { class: "scatter", "data-testid": "scatter" });
  const svg = svgEl("svg", { viewBox: "-1.1 -1.1 2.2 2.2", width: "320", height: "320" });
  const group = svgEl("g", {});
  svg.append(group);

  const points = proposals.flatMap((p) =>
    p.points_2d.map((pt) => ({ ...pt, cluster: p.cluster_id })),
  );
  const scale = Math.max(
    1e-9,
    ...points.map((p) => Math.max(Math.abs(p.x), Math.abs(p.y))),
  );
  for (const point of points) {
    group.append(
      svgEl("circle", {
        cx: String(point.x / scale),
        cy: String(point.y / scale),
        r: "0.02",
        fill: clusterColor(point.cluster),
        "data-id": point.id,
      }),
    );
  }

  // pan/zoom transforms are the one piece of client-side computation
  let zoom = 1;
  let panX = 0;
  let panY = 0;
  const apply = () => group.setAttribute(
    "transform", `translate(${panX} ${panY}) scale(${zoom})`);
  svg.addEventListener("wheel", (event) => {
    event.preventDefault();
    zoom *= event.deltaY < 0 ? 1.15 : 1 / 1.15;
    apply();
  });
  let dragging: { x: number; y: number } | null = null;
  svg.addEventListener("pointerdown", (event) => {
    dragging = { x: event.clientX, y: event.clientY };
  });
  svg.addEventListener("pointermove", (event) => {
    if (dragging) {
      panX += (event.clientX - dragging.x) / 150;
      panY += (event.clientY - dragging.y) / 150;
      dragging = { x: event.clientX, y: event.clientY };
      apply();
    }
  });
  svg.addEventListener("pointerup", () => {
    dragging = null;
  });

  wrap.append(svg);
  return wrap;
}

const SERIES: { key: "acc" | "ari" | "nmi"; color: string }[] = [
  { key: "acc", color: "#4e79a7" },
  { key: "ari", color: "#e15759" },
  { key: "nmi", color: "#59a14f" },
];

export function renderHistoryChart(history: IterationRecord[]): HTMLElement {
  const wrap = el("div", { class: "history", "data-testid": "history" });
  wrap.append(el("h3", {}, `history (${history.length} iterations)`));
  if (history.length === 0) {
    wrap.append(el("p", {}, "no iterations yet"));
    return wrap;
  }
  const width = 420;
  const height = 180;
  const svg = svgEl("svg", { viewBox: `0 0 ${width} ${height}`, width: String(width), height: String(height) });
  const xAt = (i: number) =>
    history.length === 1 ? width / 2 : 30 + (i * (width - 40)) / (history.length - 1);
  const yAt = (v: number) => height - 20 - v * (height - 40);

  const withMetrics = history.filter((r) => r.metrics);
  for (const { key, color } of SERIES) {
    if (withMetrics.length === 0) {
      break;
    }
    const path = history
      .map((r, i) => (r.metrics ? `${xAt(i)},${yAt(r.metrics[key])}` : null))
      .filter((s): s is string => s !== null)
      .join(" ");
    svg.append(svgEl("polyline", {
      points: path, fill: "none", stroke: color, "stroke-width": "2",
      "data-series": key,
    }));
  }
  const labeledPath = history
    .map((r, i) => `${xAt(i)},${yAt(r.labeled_fraction)}`)
    .join(" ");
  svg.append(svgEl("polyline", {
    points: labeledPath, fill: "none", stroke: "#b07aa1",
    "stroke-width": "2", "stroke-dasharray": "4 3", "data-series": "labeled",
  }));
  wrap.append(svg);
  const last = history[history.length - 1]!;
  const legend = SERIES.map((s) =>
    `${s.key}=${last.metrics ? last.metrics[s.key].toFixed(3) : "n/a"}`).join(" ");
  wrap.append(el("p", { class: "legend", "data-testid": "history-last" },
                 `latest: iteration ${last.iteration}, K=${last.k}, ` +
                 `labeled ${(100 * last.labeled_fraction).toFixed(1)}%, ${legend}`));
  return wrap;
}

export function renderBoard(root: HTMLElement, store: SessionStore): void {
  root.textContent = "";
  if (store.banner) {
    const retry = el("button", { "data-testid": "retry" }, "retry");
    retry.addEventListener("click", () => void store.load());
    root.append(el("div", { class: "banner", "data-testid": "banner" }, store.banner, retry));
  }
  if (!store.summary) {
    root.append(el("p", {}, "loading session..."));
    return;
  }
  root.append(renderSummary(store.summary));

  const datalist = el("datalist", { id: "intent-names" });
  for (const name of store.knownIntents()) {
    datalist.append(el("option", { value: name }));
  }
  root.append(datalist);

  const actions = el("div", { class: "actions" });
  const mergeButton = el("button", { "data-testid": "commit-merge" }, "merge selected clusters");
  mergeButton.addEventListener("click", () => store.commitMerge());
  const iterateButton = el("button", { "data-testid": "iterate" },
                           store.training ? "training..." : "iterate") as HTMLButtonElement;
  iterateButton.disabled = store.training || store.summary.status === "converged";
  iterateButton.addEventListener("click", () => void store.iterate());
  actions.append(mergeButton, iterateButton);
  if (store.training) {
    actions.append(el("span", { class: "spinner", "data-testid": "spinner" }, "⟳"));
  }
  root.append(actions);

  const generalViolations = store.violations.filter(
    (v) => v.cluster_id === undefined && !v.cluster_ids,
  );
  for (const violation of generalViolations) {
    root.append(el("div", { class: "violation" }, violation.code));
  }

  if (store.summary.status === "converged") {
    root.append(el("p", { class: "done", "data-testid": "converged" },
                   `converged: ${store.summary.termination.reason}`));
  } else {
    const board = el("div", { class: "board" });
    for (const proposal of store.proposals) {
      board.append(renderClusterCard(store, proposal));
    }
    root.append(board, renderScatter(store.proposals));
  }
  root.append(renderHistoryChart(store.history));
}
