"""Incremental human-in-the-loop intent discovery.

A session starts with everything unlabeled: contrastive pretraining runs
once, the cluster count is estimated (or fixed), and then each iteration
clusters the unlabeled pool, shows high-confidence samples per cluster,
collects feedback (from a person or the simulated oracle), grows the labeled
set and intent list, retrains through stages 1 and 2, and bumps the cluster
count to the number of known intents whenever that overtakes it.

All randomness derives from the config seed plus the iteration counter, so
replaying a session's event log reproduces the final state exactly.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ._seed import mix
from .clustering import estimate_k, kmeans
from .corpus import Corpus
from .encoder import EncoderParams, ModelSnapshot, init_params, make_snapshot
from .pipeline import (
    PipelineConfig,
    StageReport,
    evaluate,
    normalized_representations,
    run_stage1,
    run_stage2,
    run_ucl,
)

log = logging.getLogger(__name__)

STATUS_AWAITING = "awaiting_feedback"
STATUS_TRAINING = "training"
STATUS_CONVERGED = "converged"


class FeedbackValidationError(ValueError):
    """Feedback violated its invariants; ``violations`` lists each one."""

    def __init__(self, violations: list[dict]):
        super().__init__(f"invalid feedback: {violations}")
        self.violations = violations


class UnknownClusterError(KeyError):
    """Feedback referenced a cluster id absent from the current proposals."""


@dataclass
class DiscoveryConfig:
    gamma_first: float = 0.75
    gamma_rest: float = 0.95
    top_fraction: float = 0.75
    top_window: int = 20
    k_prime: int = 200
    patience: int = 2
    oracle_mode: bool = False
    max_iterations: int = 30
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        for name, g in (("gamma_first", self.gamma_first), ("gamma_rest", self.gamma_rest)):
            if not (0.0 < g < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {g}")
        if not (0.0 < self.top_fraction <= 1.0):
            raise ValueError("top_fraction must lie in (0, 1]")
        if self.top_window < 1:
            raise ValueError("top_window must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def to_dict(self) -> dict:
        p, t = self.pipeline, self.pipeline.train
        return {
            "gamma_first": self.gamma_first,
            "gamma_rest": self.gamma_rest,
            "top_fraction": self.top_fraction,
            "top_window": self.top_window,
            "k_prime": self.k_prime,
            "patience": self.patience,
            "oracle_mode": self.oracle_mode,
            "max_iterations": self.max_iterations,
            "pipeline": {
                "stage2_max_rounds": p.stage2_max_rounds,
                "stage2_change_tol": p.stage2_change_tol,
                "fixed_k": p.fixed_k,
                "k_prime": p.k_prime,
                "hidden_dim": p.hidden_dim,
                "dropout_rate": p.dropout_rate,
                "stage2_epochs_per_round": p.stage2_epochs_per_round,
                "eval_seed": p.eval_seed,
                "allow_unsupervised_stage2": p.allow_unsupervised_stage2,
                "train": {
                    "tau": t.tau,
                    "lwf_lambda": t.lwf_lambda,
                    "learning_rate": t.learning_rate,
                    "batch_size": t.batch_size,
                    "epochs": t.epochs,
                    "seed": t.seed,
                },
            },
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DiscoveryConfig":
        from .encoder import TrainConfig

        obj = dict(obj)
        pipe = dict(obj.pop("pipeline", {}))
        train = TrainConfig(**pipe.pop("train", {}))
        pipeline = PipelineConfig(train=train, **pipe)
        return cls(pipeline=pipeline, **obj)


@dataclass
class ProposalSample:
    id: str
    text: str
    confidence: float


@dataclass
class ClusterProposal:
    cluster_id: int
    size: int
    samples: list[ProposalSample]  # confidence-filtered, sorted descending
    points_2d: list[tuple[str, float, float]]  # every member, for the scatter

    def to_json_obj(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "size": self.size,
            "samples": [
                {"id": s.id, "text": s.text, "confidence": s.confidence}
                for s in self.samples
            ],
            "points_2d": [{"id": i, "x": x, "y": y} for i, x, y in self.points_2d],
        }


@dataclass
class ClusterFeedback:
    cluster_id: int
    accepted: list[str]
    rejected: list[str] = field(default_factory=list)
    intent: str | None = None


@dataclass
class Feedback:
    clusters: list[ClusterFeedback] = field(default_factory=list)
    merges: list[list[int]] = field(default_factory=list)

    def to_json_obj(self) -> dict:
        return {
            "clusters": [
                {
                    "cluster_id": c.cluster_id,
                    "accepted": list(c.accepted),
                    "rejected": list(c.rejected),
                    "intent": c.intent,
                }
                for c in self.clusters
            ],
            "merges": [list(m) for m in self.merges],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Feedback":
        return cls(
            clusters=[
                ClusterFeedback(
                    cluster_id=int(c["cluster_id"]),
                    accepted=[str(i) for i in c.get("accepted", [])],
                    rejected=[str(i) for i in c.get("rejected", [])],
                    intent=c.get("intent"),
                )
                for c in obj.get("clusters", [])
            ],
            merges=[[int(i) for i in m] for m in obj.get("merges", [])],
        )


@dataclass
class IterationRecord:
    iteration: int
    k_used: int
    intent_count: int
    labeled_fraction: float
    metrics: tuple[float, float, float] | None
    stage_reports: list[StageReport]

    def to_json_obj(self) -> dict:
        return {
            "iteration": self.iteration,
            "k": self.k_used,
            "intents": self.intent_count,
            "labeled_fraction": self.labeled_fraction,
            "metrics": (
                None
                if self.metrics is None
                else {"acc": self.metrics[0], "ari": self.metrics[1], "nmi": self.metrics[2]}
            ),
            "stage_reports": [r.to_json_obj() for r in self.stage_reports],
        }


@dataclass
class SessionState:
    corpus: Corpus
    config: DiscoveryConfig
    labeled: dict[str, str]
    unlabeled_ids: list[str]
    intents: list[str]
    k_t: int
    iteration: int
    params: EncoderParams
    snapshots: dict[str, ModelSnapshot]
    history: list[IterationRecord]
    status: str
    k_history: list[int]
    feedback_this_iteration: bool = False
    finalized: bool = False
    cached_proposals: list[ClusterProposal] | None = None
    cached_iteration: int = -1

    @property
    def labeled_fraction(self) -> float:
        return len(self.labeled) / self.corpus.n


def init_session(corpus: Corpus, cfg: DiscoveryConfig) -> SessionState:
    """Pretrain on the whole corpus, estimate (or fix) the cluster count, and
    open the session with everything unlabeled."""
    params = init_params(
        corpus.dim,
        cfg.pipeline.hidden_dim,
        cfg.pipeline.dropout_rate,
        cfg.pipeline.train.seed,
    )
    params, _ = run_ucl(corpus.embedding_matrix(), params, cfg.pipeline)
    if cfg.pipeline.fixed_k is not None:
        k1 = cfg.pipeline.fixed_k
    else:
        reps = normalized_representations(params, corpus.embedding_matrix())
        k1 = estimate_k(reps, cfg.k_prime, seed=mix(cfg.pipeline.train.seed, 41))
    session = SessionState(
        corpus=corpus,
        config=cfg,
        labeled={},
        unlabeled_ids=list(corpus.ids),
        intents=[],
        k_t=k1,
        iteration=1,
        params=params,
        snapshots={},
        history=[],
        status=STATUS_AWAITING,
        k_history=[k1],
    )
    return session


def _pca_2d(reps: np.ndarray) -> np.ndarray:
    centered = reps - reps.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    for i in range(components.shape[0]):  # canonical sign
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    coords = centered @ components.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))])
    return coords


def propose_clusters(session: SessionState) -> list[ClusterProposal]:
    """Cluster the unlabeled pool and rank each cluster's members by
    confidence, filtered to those above the iteration's threshold.

    Proposals are cached per iteration so repeated reads (and feedback
    validation) see one consistent snapshot.
    """
    if session.cached_proposals is not None and session.cached_iteration == session.iteration:
        return session.cached_proposals
    if not session.unlabeled_ids:
        session.status = STATUS_CONVERGED
        return []
    cfg = session.config
    ids = session.unlabeled_ids
    X = session.corpus.embeddings_for(ids)
    reps = normalized_representations(session.params, X)
    k = min(session.k_t, len(ids))
    model = kmeans(reps, k, seed=mix(cfg.pipeline.train.seed, 42, session.iteration))
    gamma = cfg.gamma_first if session.iteration == 1 else cfg.gamma_rest
    coords = _pca_2d(reps)
    proposals = []
    for j in range(model.k):
        member_idx = np.flatnonzero(model.assignments == j)
        ranked = sorted(
            (
                (ids[i], session.corpus.utterances[session.corpus.index_of(ids[i])].text,
                 float(model.confidences[i]))
                for i in member_idx
                if model.confidences[i] > gamma
            ),
            key=lambda t: -t[2],
        )
        proposals.append(
            ClusterProposal(
                cluster_id=j,
                size=int(len(member_idx)),
                samples=[ProposalSample(*r) for r in ranked],
                points_2d=[
                    (ids[i], float(coords[i, 0]), float(coords[i, 1])) for i in member_idx
                ],
            )
        )
    proposals.sort(key=lambda p: (-p.size, p.cluster_id))
    session.cached_proposals = proposals
    session.cached_iteration = session.iteration
    session.status = STATUS_AWAITING
    return proposals


def simulated_oracle(session: SessionState, proposals: list[ClusterProposal]) -> Feedback:
    """Answer feedback from gold labels: per cluster, accept the top
    ceil(top_fraction * len) samples when they all share one label, otherwise
    accept the samples carrying the modal label of the top-``top_window``
    ranked samples (ties broken by first occurrence). Never merges: clusters
    of the same underlying intent unify through the shared label name."""
    if not session.corpus.has_gold_labels():
        raise ValueError("the simulated oracle requires gold labels")
    cfg = session.config
    clusters: list[ClusterFeedback] = []
    for prop in proposals:
        if not prop.samples:
            continue
        golds = session.corpus.gold_for([s.id for s in prop.samples])
        top_n = math.ceil(cfg.top_fraction * len(prop.samples))
        top_golds = golds[:top_n]
        if len(set(top_golds)) == 1:
            accepted = [s.id for s in prop.samples[:top_n]]
            intent = top_golds[0]
        else:
            w = min(cfg.top_window, len(prop.samples))
            window_golds = golds[:w]
            counts = Counter(window_golds)
            best = max(counts.values())
            intent = next(g for g in window_golds if counts[g] == best)
            accepted = [
                prop.samples[i].id for i in range(w) if window_golds[i] == intent
            ]
        clusters.append(
            ClusterFeedback(cluster_id=prop.cluster_id, accepted=accepted, intent=intent)
        )
    return Feedback(clusters=clusters, merges=[])


def validate_feedback(session: SessionState, feedback: Feedback) -> list[dict]:
    """Invariant violations as machine-readable records (empty when valid)."""
    violations: list[dict] = []
    unlabeled = set(session.unlabeled_ids)
    for c in feedback.clusters:
        overlap = set(c.accepted) & set(c.rejected)
        for i in sorted(overlap):
            violations.append(
                {"code": "accept_reject_overlap", "cluster_id": c.cluster_id, "id": i}
            )
        for i in c.accepted:
            if i not in unlabeled:
                violations.append(
                    {"code": "id_not_unlabeled", "cluster_id": c.cluster_id, "id": i}
                )
        if c.accepted and not (c.intent or "").strip():
            violations.append({"code": "empty_intent", "cluster_id": c.cluster_id})
    seen: set[int] = set()
    for m in feedback.merges:
        inter = seen & set(m)
        if inter:
            violations.append({"code": "merge_overlap", "cluster_ids": sorted(inter)})
        seen |= set(m)
    named = {c.cluster_id: c for c in feedback.clusters}
    for m in feedback.merges:
        if not any(
            cid in named and (named[cid].intent or "").strip() for cid in m
        ):
            violations.append({"code": "merge_unnamed", "cluster_ids": sorted(m)})
    return violations


def _check_known_clusters(session: SessionState, feedback: Feedback) -> None:
    if session.cached_proposals is None or session.cached_iteration != session.iteration:
        return
    known = {p.cluster_id for p in session.cached_proposals}
    referenced = {c.cluster_id for c in feedback.clusters} | {
        cid for m in feedback.merges for cid in m
    }
    unknown = sorted(referenced - known)
    if unknown:
        raise UnknownClusterError(f"unknown cluster ids {unknown}")


def apply_feedback(session: SessionState, feedback: Feedback) -> SessionState:
    """Move accepted ids from the unlabeled pool into the labeled set under
    their assigned intents; merged clusters share one intent name. Rejected
    ids stay unlabeled."""
    _check_known_clusters(session, feedback)
    violations = validate_feedback(session, feedback)
    if violations:
        raise FeedbackValidationError(violations)

    # merged clusters adopt the first named member's intent (ascending id)
    merged_name: dict[int, str] = {}
    named = {c.cluster_id: c for c in feedback.clusters}
    for m in feedback.merges:
        name = next(
            (named[cid].intent.strip() for cid in sorted(m)
             if cid in named and (named[cid].intent or "").strip()),
            None,
        )
        for cid in m:
            merged_name[cid] = name

    moved = 0
    for c in feedback.clusters:
        if not c.accepted:
            continue
        intent = merged_name.get(c.cluster_id) or c.intent.strip()
        if intent not in session.intents:
            session.intents.append(intent)
        for i in c.accepted:
            session.labeled[i] = intent
            moved += 1
    if moved:
        gone = set(session.labeled)
        session.unlabeled_ids = [i for i in session.unlabeled_ids if i not in gone]
        session.feedback_this_iteration = True
    session.status = STATUS_AWAITING
    return session


def advance_iteration(session: SessionState) -> SessionState:
    """Retrain on the grown labeled set (stage 1), deep-cluster everything
    (stage 2), record metrics, then bump k to |intents| when that exceeds it."""
    if not session.feedback_this_iteration:
        log.warning(
            "advance_iteration called with no feedback this iteration; no-op"
        )
        return session
    cfg = session.config
    session.status = STATUS_TRAINING
    corpus = session.corpus

    labeled_ids = list(session.labeled.keys())
    X_l = corpus.embeddings_for(labeled_ids)
    labels = [session.labeled[i] for i in labeled_ids]

    session.snapshots["stage1"] = make_snapshot(session.params)
    session.params, rep1 = run_stage1(
        session.params, X_l, labels, session.intents, session.params, cfg.pipeline
    )
    session.snapshots["stage2"] = make_snapshot(session.params)
    session.params, _, rep2 = run_stage2(
        session.params, corpus.embedding_matrix(), session.k_t, session.params, cfg.pipeline
    )

    metrics = None
    if corpus.has_gold_labels():
        gold = [u.gold_label for u in corpus.utterances]
        metrics = evaluate(
            session.params,
            corpus.embedding_matrix(),
            gold,
            session.k_t,
            cfg.pipeline.eval_seed,
        )
    session.history.append(
        IterationRecord(
            iteration=session.iteration,
            k_used=session.k_t,
            intent_count=len(session.intents),
            labeled_fraction=session.labeled_fraction,
            metrics=metrics,
            stage_reports=[rep1, rep2],
        )
    )
    session.k_t = max(session.k_t, len(session.intents))
    session.iteration += 1
    session.k_history.append(session.k_t)
    session.feedback_this_iteration = False
    session.cached_proposals = None
    session.cached_iteration = -1
    done, _ = should_terminate(session)
    session.status = STATUS_CONVERGED if done else STATUS_AWAITING
    return session


def should_terminate(session: SessionState) -> tuple[bool, str]:
    """Oracle mode stops when every gold intent is discovered; interactive
    mode stops when k has been stable for ``patience`` iterations, the
    unlabeled pool is empty, or the user finalized the session."""
    if session.finalized:
        return True, "finalized by user"
    if not session.unlabeled_ids:
        return True, "unlabeled pool exhausted"
    if session.config.oracle_mode:
        if len(session.intents) == len(session.corpus.vocab):
            return True, "all intents discovered"
        return False, "intents remaining"
    p = session.config.patience
    kh = session.k_history
    if len(kh) >= p + 1 and len(set(kh[-(p + 1):])) == 1:
        return True, f"cluster count stable for {p} iterations"
    return False, "in progress"


def session_fingerprint(session: SessionState) -> str:
    """Hash of the semantic session state (wall-clock timings excluded),
    used to verify replay and crash-restart equivalence."""
    h = hashlib.sha256()

    def put(*parts):
        for p in parts:
            h.update(repr(p).encode("utf-8"))
            h.update(b"\x1f")

    put("labeled", sorted(session.labeled.items()))
    put("unlabeled", session.unlabeled_ids)
    put("intents", session.intents)
    put("k_t", session.k_t, "iteration", session.iteration, "status", session.status)
    put("k_history", session.k_history, "fb", session.feedback_this_iteration)
    h.update(np.ascontiguousarray(session.params.w_dense).tobytes())
    h.update(np.ascontiguousarray(session.params.b_dense).tobytes())
    for head in session.params.heads:
        put("head", head.label_space)
        h.update(np.ascontiguousarray(head.w).tobytes())
    for rec in session.history:
        put(
            rec.iteration,
            rec.k_used,
            rec.intent_count,
            rec.labeled_fraction.hex(),
            None if rec.metrics is None else tuple(m.hex() for m in rec.metrics),
            [tuple(x.hex() for x in r.losses) for r in rec.stage_reports],
        )
    return h.hexdigest()


def replay_events(corpus: Corpus, events: list[dict]) -> SessionState:
    """Rebuild a session by re-running its event log from scratch."""
    if not events or events[0].get("type") != "session_created":
        raise ValueError("event log must start with a session_created event")
    cfg = DiscoveryConfig.from_dict(events[0]["payload"]["config"])
    session = init_session(corpus, cfg)
    for ev in events[1:]:
        kind = ev.get("type")
        if kind == "feedback_applied":
            apply_feedback(session, Feedback.from_json_obj(ev["payload"]["feedback"]))
        elif kind == "iteration_advanced":
            advance_iteration(session)
        elif kind == "finalized":
            session.finalized = True
            session.status = STATUS_CONVERGED
        else:
            raise ValueError(f"unknown event type {kind!r}")
    return session
