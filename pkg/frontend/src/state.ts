/** Session store: holds the fetched server state plus the operator's
 * in-progress selections, and turns them into idempotent mutations.
 *
 * Request ids are minted when an action first fires and reused while it is
 * in flight, so a double-click produces exactly one server-side mutation.
 */

import {
  ApiClient,
  ClusterProposal,
  ConflictError,
  FeedbackCluster,
  IterationRecord,
  SessionSummary,
  ValidationError,
  Violation,
  newRequestId,
} from "./api.js";

export type Listener = () => void;

export interface PendingAction {
  feedbackRequestId: string;
  iterateRequestId: string;
  promise: Promise<void>;
}

export class SessionStore {
  summary: SessionSummary | null = null;
  proposals: ClusterProposal[] = [];
  gamma = 0;
  history: IterationRecord[] = [];

  /** cluster id -> selected sample ids (pre-checked to the server's list) */
  selections = new Map<number, Set<string>>();
  /** cluster id -> intent name typed by the operator */
  intentNames = new Map<number, string>();
  /** clusters marked for the next merge group */
  mergeMarks = new Set<number>();
  /** committed merge groups, sent with the next feedback */
  merges: number[][] = [];

  violations: Violation[] = [];
  banner: string | null = null;
  training = false;

  private pending: PendingAction | null = null;
  private listeners: Listener[] = [];

  constructor(
    private api: ApiClient,
    public sessionId: string,
  ) {}

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const l of this.listeners) {
      l();
    }
  }

  async load(): Promise<void> {
    try {
      this.summary = await this.api.summary(this.sessionId);
      if (this.summary.status !== "converged") {
        const body = await this.api.proposals(this.sessionId);
        this.proposals = body.proposals;
        this.gamma = body.gamma;
      } else {
        this.proposals = [];
      }
      this.history = await this.api.history(this.sessionId);
      this.banner = null;
    } catch (err) {
      if (err instanceof ConflictError) {
        this.banner = "training is in flight; refresh shortly";
      } else {
        this.banner = `network failure: ${(err as Error).message}; retry`;
      }
    }
    this.emit();
  }

  /** Drop local edits (used after the server advances an iteration). */
  clearLocalEdits(): void {
    this.selections.clear();
    this.intentNames.clear();
    this.mergeMarks.clear();
    this.merges = [];
    this.violations = [];
  }

  toggleSample(clusterId: number, sampleId: string): void {
    const set = this.selections.get(clusterId) ?? new Set<string>();
    if (set.has(sampleId)) {
      set.delete(sampleId);
    } else {
      set.add(sampleId);
    }
    this.selections.set(clusterId, set);
    this.emit();
  }

  setIntent(clusterId: number, name: string): void {
    this.intentNames.set(clusterId, name);
    this.emit();
  }

  toggleMergeMark(clusterId: number): void {
    if (this.mergeMarks.has(clusterId)) {
      this.mergeMarks.delete(clusterId);
    } else {
      this.mergeMarks.add(clusterId);
    }
    this.emit();
  }

  /** Turn the current merge marks into a merge group. */
  commitMerge(): void {
    if (this.mergeMarks.size < 2) {
      return;
    }
    const already = new Set(this.merges.flat());
    const group = [...this.mergeMarks].sort((a, b) => a - b);
    if (group.some((c) => already.has(c))) {
      this.banner = "a cluster can join only one merge group";
      this.emit();
      return;
    }
    this.merges.push(group);
    this.mergeMarks.clear();
    this.emit();
  }

  /** Known intent names for the autocomplete field. */
  knownIntents(): string[] {
    return this.summary ? this.summary.intents.map((entry) => entry.name) : [];
  }

  feedbackClusters(): FeedbackCluster[] {
    const clusters: FeedbackCluster[] = [];
    for (const proposal of this.proposals) {
      const selected = this.selections.get(proposal.cluster_id);
      const intent = this.intentNames.get(proposal.cluster_id)?.trim() || null;
      const accepted = selected ? [...selected] : [];
      // keep the server's confidence order inside the payload too
      accepted.sort((a, b) => {
        const order = proposal.samples.map((s) => s.id);
        return order.indexOf(a) - order.indexOf(b);
      });
      const rejected = proposal.samples
        .map((s) => s.id)
        .filter((id) => selected && !selected.has(id) && accepted.length > 0);
      if (accepted.length > 0 || this.merges.some((g) => g.includes(proposal.cluster_id))) {
        clusters.push({
          cluster_id: proposal.cluster_id,
          accepted,
          rejected,
          intent,
        });
      }
    }
    return clusters;
  }

  /** Submit the selections and merges, then run one training iteration.
   * Re-entrant calls while in flight return the same action (one mutation). */
  iterate(): PendingAction {
    if (this.pending) {
      return this.pending;
    }
    const action: PendingAction = {
      feedbackRequestId: newRequestId(),
      iterateRequestId: newRequestId(),
      promise: Promise.resolve(),
    };
    action.promise = this.runIteration(action);
    this.pending = action;
    return action;
  }

  private async runIteration(action: PendingAction): Promise<void> {
    this.violations = [];
    this.banner = null;
    this.training = true;
    this.emit();
    try {
      const clusters = this.feedbackClusters();
      if (clusters.length > 0 || this.merges.length > 0) {
        await this.api.submitFeedback(this.sessionId, {
          clusters,
          merges: this.merges,
          request_id: action.feedbackRequestId,
        });
      }
      const job = await this.api.iterate(this.sessionId, action.iterateRequestId);
      await this.api.waitForJob(job.job_id);
      this.clearLocalEdits();
    } catch (err) {
      if (err instanceof ValidationError) {
        this.violations = err.violations;
      } else if (err instanceof ConflictError) {
        this.banner = "another mutation is in flight; refreshing";
      } else {
        this.banner = `iteration failed: ${(err as Error).message}`;
      }
    } finally {
      this.training = false;
      this.pending = null;
      await this.load();
    }
  }

  violationsFor(clusterId: number): Violation[] {
    return this.violations.filter(
      (v) => v.cluster_id === clusterId || v.cluster_ids?.includes(clusterId),
    );
  }
}
