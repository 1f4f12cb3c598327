"""Three-stage training orchestration.

Stage order: contrastive domain adaptation over everything, supervised
fine-tuning on the labeled subset, then iterative pseudo-label deep
clustering with cross-round centroid alignment. The distillation term in
stages 1 and 2 pulls the current model toward a snapshot frozen at stage
entry, so each stage learns its task without erasing the previous one.

Head lifecycle per stage entry: the most recently trained head of the
snapshot source becomes the frozen distillation target; a trainable head
over the stage's label space is reused if present, freshly initialized
otherwise. At most two heads live on the params at a time.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._seed import derive_rng, mix
from .clustering import ClusterModel, align_centroids, apply_alignment, kmeans
from .encoder import (
    AdamState,
    ClassifierHead,
    EncoderParams,
    ModelSnapshot,
    TrainConfig,
    apply_update,
    init_head,
    make_snapshot,
    representations,
    supervised_step,
    ucl_step,
)
from .metrics import ari, clustering_accuracy, nmi


class TrainingDivergedError(RuntimeError):
    """A non-finite loss appeared; message names stage/epoch/batch."""


class StageOrderError(RuntimeError):
    """Stage-2 was requested without a preceding supervised head."""


@dataclass
class PipelineConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    stage2_max_rounds: int = 10
    stage2_change_tol: float = 0.005
    fixed_k: int | None = None
    k_prime: int = 200
    hidden_dim: int = 768
    dropout_rate: float = 0.1
    stage2_epochs_per_round: int = 1
    eval_seed: int = 0xC0FFEE
    allow_unsupervised_stage2: bool = False

    def __post_init__(self):
        if not (0.0 < self.stage2_change_tol < 1.0):
            raise ValueError("stage2_change_tol must lie in (0, 1)")
        if self.stage2_max_rounds < 1:
            raise ValueError("stage2_max_rounds must be >= 1")


@dataclass
class StageReport:
    stage: str
    epochs: int
    losses: list[float]
    final_loss: float | None
    wall_time_s: float
    metrics: tuple[float, float, float] | None = None
    detail: dict = field(default_factory=dict)

    def to_json_obj(self, cfg: PipelineConfig | None = None) -> dict:
        obj = {
            "stage": self.stage,
            "epochs": self.epochs,
            "losses": self.losses,
            "final_loss": self.final_loss,
            "wall_time_s": self.wall_time_s,
            "metrics": (
                None
                if self.metrics is None
                else {"acc": self.metrics[0], "ari": self.metrics[1], "nmi": self.metrics[2]}
            ),
            "detail": self.detail,
        }
        if cfg is not None:
            obj["config"] = {
                "seed": cfg.train.seed,
                "tau": cfg.train.tau,
                "lwf_lambda": cfg.train.lwf_lambda,
                "learning_rate": cfg.train.learning_rate,
                "batch_size": cfg.train.batch_size,
                "epochs": cfg.train.epochs,
                "stage2_max_rounds": cfg.stage2_max_rounds,
                "stage2_change_tol": cfg.stage2_change_tol,
                "fixed_k": cfg.fixed_k,
                "k_prime": cfg.k_prime,
                "hidden_dim": cfg.hidden_dim,
                "dropout_rate": cfg.dropout_rate,
            }
        return obj


def l2_normalize(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.maximum(norms, 1e-12)


def normalized_representations(params: EncoderParams, X: np.ndarray) -> np.ndarray:
    """Inference-mode representations, unit-norm rows (cosine geometry)."""
    return l2_normalize(representations(params, X))


def _label_space_seed(label_space: Sequence[str], seed: int) -> int:
    return mix(seed, zlib.crc32("\x1f".join(label_space).encode("utf-8")))


def _arrange_heads(
    params: EncoderParams,
    snapshot: ModelSnapshot | None,
    label_space: tuple[str, ...],
    head_seed: int,
) -> int:
    """Set params.heads to [retained?, training] and return the training index.

    The retained head (over the snapshot's label space) stays trainable so the
    distillation gradient can flow through it; it is the training head itself
    when the label spaces coincide.
    """
    training = next((h for h in params.heads if h.label_space == label_space), None)
    if training is None:
        training = init_head(label_space, params.d_h, head_seed)
    retained = None
    if snapshot is not None and snapshot.head is not None:
        if snapshot.head.label_space != label_space:
            retained = next(
                (h for h in params.heads if h.label_space == snapshot.head.label_space),
                None,
            )
            if retained is None:
                retained = snapshot.head.copy()
    params.heads = ([retained] if retained is not None else []) + [training]
    return len(params.heads) - 1


def run_ucl(
    X: np.ndarray, params: EncoderParams, cfg: PipelineConfig
) -> tuple[EncoderParams, StageReport]:
    """Contrastive pretraining over all rows of X (labels ignored)."""
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty corpus")
    tc = cfg.train
    opt = AdamState()
    losses: list[float] = []
    for epoch in range(tc.epochs):
        order = derive_rng(tc.seed, 11, epoch).permutation(n)
        batch_losses = []
        for b, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start : start + tc.batch_size]
            if len(idx) < 2:
                continue  # a contrastive step needs at least one negative
            loss, grads = ucl_step(params, X[idx], tc, mix(tc.seed, 12, epoch, b))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"ucl: non-finite loss at epoch {epoch} batch {b}"
                )
            params, opt = apply_update(params, grads, tc, opt)
            batch_losses.append(loss)
        if batch_losses:
            losses.append(float(np.mean(batch_losses)))
    report = StageReport(
        stage="ucl",
        epochs=tc.epochs,
        losses=losses,
        final_loss=losses[-1] if losses else None,
        wall_time_s=time.perf_counter() - t0,
    )
    return params, report


def run_stage1(
    params: EncoderParams,
    X: np.ndarray,
    labels: list[str],
    label_space: Sequence[str],
    snapshot_source: EncoderParams,
    cfg: PipelineConfig,
) -> tuple[EncoderParams, StageReport]:
    """Supervised fine-tuning on the labeled set with distillation against
    the pre-stage snapshot (pure cross-entropy when no head exists yet).

    The trained head is kept on the params afterwards; representation
    extraction ignores heads, so it only serves later distillation.
    """
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("stage-1 requires a nonempty labeled set")
    if len(labels) != n:
        raise ValueError(f"{n} samples but {len(labels)} labels")
    tc = cfg.train
    snapshot = make_snapshot(snapshot_source) if snapshot_source.heads else None
    space = tuple(label_space)
    head_idx = _arrange_heads(params, snapshot, space, _label_space_seed(space, tc.seed))
    opt = AdamState()
    losses: list[float] = []
    for epoch in range(tc.epochs):
        order = derive_rng(tc.seed, 21, epoch).permutation(n)
        batch_losses = []
        for b, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start : start + tc.batch_size]
            loss, grads = supervised_step(
                params,
                head_idx,
                snapshot,
                X[idx],
                [labels[i] for i in idx],
                tc,
                mix(tc.seed, 22, epoch, b),
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"stage1: non-finite loss at epoch {epoch} batch {b}"
                )
            params, opt = apply_update(params, grads, tc, opt)
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
    report = StageReport(
        stage="stage1",
        epochs=tc.epochs,
        losses=losses,
        final_loss=losses[-1] if losses else None,
        wall_time_s=time.perf_counter() - t0,
    )
    return params, report


def run_stage2(
    params: EncoderParams,
    X: np.ndarray,
    k: int,
    snapshot_source: EncoderParams,
    cfg: PipelineConfig,
) -> tuple[EncoderParams, ClusterModel, StageReport]:
    """Iterative pseudo-label deep clustering.

    Each round re-clusters current representations, aligns cluster indices to
    the previous round (optimal centroid matching) so pseudo-labels stay
    consistent, then trains on the aligned pseudo-labels with distillation
    against the pre-stage snapshot. Stops early once the fraction of points
    whose aligned pseudo-label changed falls below ``stage2_change_tol``.
    """
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if not snapshot_source.heads and not cfg.allow_unsupervised_stage2:
        raise StageOrderError(
            "stage-2 requires a stage-1 head/snapshot; "
            "set allow_unsupervised_stage2 to override"
        )
    tc = cfg.train
    snapshot = make_snapshot(snapshot_source) if snapshot_source.heads else None
    pseudo_space = tuple(f"pseudo_{i}" for i in range(k))
    head_idx = _arrange_heads(
        params, snapshot, pseudo_space, _label_space_seed(pseudo_space, tc.seed)
    )
    opt = AdamState()
    losses: list[float] = []
    changed_fractions: list[float] = []
    prev_model: ClusterModel | None = None
    rounds_trained = 0
    stopped_early = False
    for r in range(cfg.stage2_max_rounds):
        reps = normalized_representations(params, X)
        model = kmeans(reps, k, seed=mix(tc.seed, 31, r))
        if prev_model is not None:
            model = apply_alignment(model, align_centroids(prev_model, model))
            frac = float(np.mean(model.assignments != prev_model.assignments))
            changed_fractions.append(frac)
            if frac < cfg.stage2_change_tol:
                prev_model = model
                stopped_early = True
                break
        prev_model = model
        pseudo = [pseudo_space[j] for j in model.assignments]
        n = X.shape[0]
        round_losses = []
        for epoch in range(cfg.stage2_epochs_per_round):
            order = derive_rng(tc.seed, 32, r, epoch).permutation(n)
            for b, start in enumerate(range(0, n, tc.batch_size)):
                idx = order[start : start + tc.batch_size]
                loss, grads = supervised_step(
                    params,
                    head_idx,
                    snapshot,
                    X[idx],
                    [pseudo[i] for i in idx],
                    tc,
                    mix(tc.seed, 33, r, epoch, b),
                )
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"stage2: non-finite loss at round {r} epoch {epoch} batch {b}"
                    )
                params, opt = apply_update(params, grads, tc, opt)
                round_losses.append(loss)
        losses.append(float(np.mean(round_losses)))
        rounds_trained += 1
    assert prev_model is not None
    report = StageReport(
        stage="stage2",
        epochs=rounds_trained,
        losses=losses,
        final_loss=losses[-1] if losses else None,
        wall_time_s=time.perf_counter() - t0,
        detail={
            "rounds_trained": rounds_trained,
            "changed_fractions": changed_fractions,
            "stopped_early": stopped_early,
        },
    )
    return params, prev_model, report


def evaluate(
    params: EncoderParams,
    X: np.ndarray,
    gold_labels: list[str],
    k: int,
    seed: int,
) -> tuple[float, float, float]:
    """Cluster current representations with a fixed seed and score against
    gold labels: (accuracy, adjusted Rand, normalized mutual information)."""
    if len(gold_labels) != len(X):
        raise ValueError("every evaluation point needs a gold label")
    if any(l is None for l in gold_labels):
        raise ValueError("evaluation requires gold labels")
    reps = normalized_representations(params, np.asarray(X, dtype=np.float64))
    model = kmeans(reps, k, seed=seed)
    pred = model.assignments.tolist()
    return (
        clustering_accuracy(gold_labels, pred),
        ari(gold_labels, pred),
        nmi(gold_labels, pred),
    )
