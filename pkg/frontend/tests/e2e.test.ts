/** End-to-end acceptance against a live service: drive the session store
 * through the full review flow (accept in two clusters, merge two clusters,
 * iterate, double-submit) and verify every effect server-side. */

import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { ApiClient, newRequestId } from "../src/api.js";
import { SessionStore } from "../src/state.js";

const PYTHON = process.env.CDI_PYTHON ?? "python3";

let server: ChildProcess;
let base: string;
let api: ApiClient;
let corpusId: string;

async function waitReady(url: string, deadlineMs = 30_000): Promise<void> {
  const t0 = Date.now();
  while (Date.now() - t0 < deadlineMs) {
    try {
      const r = await fetch(url + "/sessions");
      if (r.ok) {
        return;
      }
    } catch {
      // not up yet
    }
    await new Promise((resolve) => setTimeout(resolve, 150));
  }
  throw new Error("service did not come up");
}

const SMALL_CONFIG = {
  gamma_first: 0.7,
  gamma_rest: 0.7,
  pipeline: {
    fixed_k: 4,
    hidden_dim: 16,
    dropout_rate: 0.2,
    stage2_max_rounds: 2,
    train: { tau: 0.5, epochs: 1, batch_size: 64, learning_rate: 1e-3, seed: 11 },
  },
};

beforeAll(async () => {
  const work = mkdtempSync(join(tmpdir(), "cdi-ui-"));
  const blobs = join(work, "blobs");
  execFileSync(PYTHON, [
    "-m", "cdi.cli", "synth", "--n", "120", "--k", "4", "--dim", "8",
    "--separation", "10", "--noise-sigma", "0.4", "--seed", "2", "--out", blobs,
  ]);
  const port = 18000 + Math.floor(Math.random() * 2000);
  base = `http://127.0.0.1:${port}`;
  server = spawn(PYTHON, [
    "-c",
    "import uvicorn; from cdi.service import create_app; " +
      `uvicorn.run(create_app(${JSON.stringify(join(work, "store"))}), ` +
      `host='127.0.0.1', port=${port}, log_level='critical')`,
  ], { stdio: "inherit" });
  await waitReady(base);
  api = new ApiClient(base);
  const uploaded = await api.uploadCorpus(
    new Blob([readFileSync(blobs + ".jsonl")]),
    new Blob([readFileSync(blobs + ".cdie")]),
  );
  corpusId = uploaded.corpus_id;
}, 120_000);

afterAll(() => {
  server?.kill("SIGKILL");
});

async function newSession(): Promise<SessionStore> {
  const created = await api.createSession(corpusId, SMALL_CONFIG, newRequestId());
  const store = new SessionStore(api, created.session_id);
  await store.load();
  return store;
}

describe("review flow against a live service", () => {
  it("loads a session with proposals in confidence order", async () => {
    const store = await newSession();
    expect(store.summary?.iteration).toBe(1);
    expect(store.summary?.counts.total).toBe(120);
    expect(store.proposals.length).toBe(4);
    for (const proposal of store.proposals) {
      const confidences = proposal.samples.map((s) => s.confidence);
      const sorted = [...confidences].sort((a, b) => b - a);
      expect(confidences).toEqual(sorted);
      for (const c of confidences) {
        expect(c).toBeGreaterThan(store.gamma);
      }
    }
  }, 120_000);

  it("accepts samples in two clusters, merges two clusters, and iterates", async () => {
    const store = await newSession();
    const eligible = store.proposals.filter((p) => p.samples.length >= 2);
    expect(eligible.length).toBeGreaterThanOrEqual(4);
    const [a, b, c, d] = eligible as [
      (typeof eligible)[0], (typeof eligible)[0],
      (typeof eligible)[0], (typeof eligible)[0],
    ];

    // two clusters under fresh intent names
    store.toggleSample(a.cluster_id, a.samples[0]!.id);
    store.toggleSample(a.cluster_id, a.samples[1]!.id);
    store.setIntent(a.cluster_id, "alpha");
    store.toggleSample(b.cluster_id, b.samples[0]!.id);
    store.setIntent(b.cluster_id, "beta");

    // two more merged under the first's name
    store.toggleSample(c.cluster_id, c.samples[0]!.id);
    store.setIntent(c.cluster_id, "gamma");
    store.toggleSample(d.cluster_id, d.samples[0]!.id);
    store.setIntent(d.cluster_id, "delta");
    store.toggleMergeMark(c.cluster_id);
    store.toggleMergeMark(d.cluster_id);
    store.commitMerge();
    expect(store.merges).toEqual([
      [Math.min(c.cluster_id, d.cluster_id), Math.max(c.cluster_id, d.cluster_id)],
    ]);

    await store.iterate().promise;

    expect(store.banner).toBeNull();
    expect(store.violations).toEqual([]);
    expect(store.summary?.iteration).toBe(2);
    expect(store.history.length).toBe(1);
    expect(store.history[0]!.labeled_fraction).toBeCloseTo(5 / 120, 10);

    const names = store.summary!.intents.map((entry) => entry.name);
    expect(names).toContain("alpha");
    expect(names).toContain("beta");
    // the merge collapsed gamma+delta into the lowest named cluster's intent
    const unified = Math.min(c.cluster_id, d.cluster_id) === c.cluster_id ? "gamma" : "delta";
    const dropped = unified === "gamma" ? "delta" : "gamma";
    expect(names).toContain(unified);
    expect(names).not.toContain(dropped);
    const merged = store.summary!.intents.find((entry) => entry.name === unified);
    expect(merged?.count).toBe(2);
  }, 120_000);

  it("double submit produces exactly one mutation", async () => {
    const store = await newSession();
    const target = store.proposals.find((p) => p.samples.length >= 1)!;
    store.toggleSample(target.cluster_id, target.samples[0]!.id);
    store.setIntent(target.cluster_id, "solo");

    // rapid double click: the second call reuses the in-flight action
    const first = store.iterate();
    const second = store.iterate();
    expect(second).toBe(first);
    await Promise.all([first.promise, second.promise]);
    expect(store.summary?.iteration).toBe(2);
    expect(store.history.length).toBe(1);
    expect(store.summary?.counts.labeled).toBe(1);

    // replaying the identical feedback request id is a server-side no-op
    const replay = await api.submitFeedback(store.sessionId, {
      clusters: [{
        cluster_id: target.cluster_id,
        accepted: [target.samples[0]!.id],
        rejected: [],
        intent: "solo",
      }],
      merges: [],
      request_id: first.feedbackRequestId,
    });
    expect(replay).toEqual({ applied: false, duplicate: true });
    const summary = await api.summary(store.sessionId);
    expect(summary.counts.labeled).toBe(1);
  }, 120_000);

  it("surfaces validation violations inline instead of mutating", async () => {
    const store = await newSession();
    const target = store.proposals.find((p) => p.samples.length >= 1)!;
    store.toggleSample(target.cluster_id, target.samples[0]!.id);
    // no intent name: the server must reject with empty_intent
    await store.iterate().promise;
    expect(store.violations.some((v) => v.code === "empty_intent")).toBe(true);
    expect(store.summary?.iteration).toBe(1);
    expect(store.summary?.counts.labeled).toBe(0);
  }, 120_000);
});
