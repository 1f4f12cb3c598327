/** Typed client for the discovery service JSON API. All state shown in the
 * UI comes from these calls; nothing is computed client-side. */

export interface IntentCount {
  name: string;
  count: number;
}

export interface SessionSummary {
  session_id: string;
  corpus_id: string;
  status: "awaiting_feedback" | "training" | "converged";
  iteration: number;
  k: number;
  counts: { labeled: number; unlabeled: number; total: number };
  labeled_fraction: number;
  intents: IntentCount[];
  termination: { done: boolean; reason: string };
}

export interface ProposalSample {
  id: string;
  text: string;
  confidence: number;
}

export interface Point2D {
  id: string;
  x: number;
  y: number;
}

export interface ClusterProposal {
  cluster_id: number;
  size: number;
  samples: ProposalSample[];
  points_2d: Point2D[];
}

export interface ProposalsResponse {
  iteration: number;
  k: number;
  gamma: number;
  proposals: ClusterProposal[];
}

export interface IterationRecord {
  iteration: number;
  k: number;
  intents: number;
  labeled_fraction: number;
  metrics: { acc: number; ari: number; nmi: number } | null;
}

export interface FeedbackCluster {
  cluster_id: number;
  accepted: string[];
  rejected: string[];
  intent: string | null;
}

export interface FeedbackPayload {
  clusters: FeedbackCluster[];
  merges: number[][];
  request_id: string;
}

export interface Violation {
  code: string;
  cluster_id?: number;
  id?: string;
  cluster_ids?: number[];
}

export interface JobStatus {
  status: "queued" | "running" | "done" | "error";
  iteration?: number;
  error?: string;
}

/** Server rejected the request body (HTTP 422) with machine-readable details. */
export class ValidationError extends Error {
  constructor(public violations: Violation[]) {
    super(`validation failed: ${violations.map((v) => v.code).join(", ")}`);
  }
}

/** Another mutation is in flight (HTTP 409); refetch and retry. */
export class ConflictError extends Error {}

export class NotFoundError extends Error {}

async function check(response: Response): Promise<any> {
  if (response.status === 409) {
    throw new ConflictError(await response.text());
  }
  if (response.status === 404) {
    throw new NotFoundError(await response.text());
  }
  if (response.status === 422) {
    const body = await response.json().catch(() => ({}));
    throw new ValidationError(body.violations ?? [{ code: "invalid_request" }]);
  }
  if (!response.ok) {
    throw new Error(`HTTP ${response.status}: ${await response.text()}`);
  }
  return response.json();
}

export class ApiClient {
  constructor(private base: string = "") {}

  private url(path: string): string {
    return this.base + path;
  }

  async listSessions(): Promise<string[]> {
    const body = await check(await fetch(this.url("/sessions")));
    return body.sessions;
  }

  async createSession(corpusId: string, config: object, requestId: string): Promise<{ session_id: string }> {
    return check(
      await fetch(this.url("/sessions"), {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ corpus_id: corpusId, config, request_id: requestId }),
      }),
    );
  }

  async uploadCorpus(dataset: Blob, embeddings: Blob): Promise<{ corpus_id: string }> {
    const form = new FormData();
    form.append("dataset", dataset, "dataset.jsonl");
    form.append("embeddings", embeddings, "embeddings.cdie");
    return check(await fetch(this.url("/corpora"), { method: "POST", body: form }));
  }

  async summary(sessionId: string): Promise<SessionSummary> {
    return check(await fetch(this.url(`/sessions/${sessionId}`)));
  }

  async proposals(sessionId: string): Promise<ProposalsResponse> {
    return check(await fetch(this.url(`/sessions/${sessionId}/proposals`)));
  }

  async history(sessionId: string): Promise<IterationRecord[]> {
    const body = await check(await fetch(this.url(`/sessions/${sessionId}/history`)));
    return body.history;
  }

  async submitFeedback(sessionId: string, payload: FeedbackPayload): Promise<{ applied: boolean; duplicate?: boolean }> {
    return check(
      await fetch(this.url(`/sessions/${sessionId}/feedback`), {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(payload),
      }),
    );
  }

  async iterate(sessionId: string, requestId: string): Promise<{ job_id: string; duplicate?: boolean }> {
    return check(
      await fetch(this.url(`/sessions/${sessionId}/iterate`), {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ request_id: requestId }),
      }),
    );
  }

  async job(jobId: string): Promise<JobStatus> {
    return check(await fetch(this.url(`/jobs/${jobId}`)));
  }

  /** Poll a job until it leaves the queue; throws on a failed job. */
  async waitForJob(jobId: string, intervalMs = 300, timeoutMs = 600_000): Promise<JobStatus> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const status = await this.job(jobId);
      if (status.status === "done") {
        return status;
      }
      if (status.status === "error") {
        throw new Error(status.error ?? "training job failed");
      }
      if (Date.now() > deadline) {
        throw new Error("timed out waiting for the training job");
      }
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }
}

export function newRequestId(): string {
  if (typeof crypto !== "undefined" && "randomUUID" in crypto) {
    return crypto.randomUUID();
  }
  return `req-${Date.now()}-${Math.random().toString(36).slice(2)}`;
}
