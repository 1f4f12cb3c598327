"""Trainable projection head over frozen base embeddings.

The model is a single dense layer with Tanh over the (optionally
dropout-masked) input embedding, plus any number of bias-free linear
classifier heads: h = tanh(W (x*mask) + b), logits_j = head_j.w @ h.

All losses return exact analytic gradients (checked against central finite
differences in the test suite):

* contrastive step: InfoNCE over two dropout views of the same batch,
  cosine similarities scaled by a temperature; the denominator includes the
  positive term.
* cross-entropy step: softmax classification on one head.
* distillation step: cross-entropy between a frozen snapshot's output
  distribution and the current model's output through the retained
  old-label-space head (the forgetting-prevention term).
* supervised step: cross-entropy plus lambda times distillation.

Compute is float64 internally; checkpoints exchange float32 (CDIM format).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._seed import derive_rng

CDIM_MAGIC = b"CDIM"
CDIM_VERSION = 1

_NORM_FLOOR = 1e-12


class DegenerateRepresentationError(ValueError):
    """A cosine was requested on a zero-norm representation."""


class MissingRetainedHeadError(ValueError):
    """Distillation requires a head over the snapshot's label space."""


class UnknownLabelError(ValueError):
    """A training label is not in the head's label space."""


@dataclass
class ClassifierHead:
    w: np.ndarray  # (k, d_h), no bias
    label_space: tuple[str, ...]

    def __post_init__(self):
        self.label_space = tuple(self.label_space)
        if len(set(self.label_space)) != len(self.label_space):
            raise ValueError("label_space entries must be distinct")
        if self.w.shape[0] != len(self.label_space):
            raise ValueError(
                f"head has {self.w.shape[0]} rows but {len(self.label_space)} labels"
            )

    @property
    def k(self) -> int:
        return len(self.label_space)

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(w=self.w.copy(), label_space=self.label_space)


@dataclass
class EncoderParams:
    w_dense: np.ndarray  # (d_h, d)
    b_dense: np.ndarray  # (d_h,)
    heads: list[ClassifierHead] = field(default_factory=list)
    dropout_rate: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.d_h < 2:
            raise ValueError(f"hidden dim must be >= 2, got {self.d_h}")

    @property
    def d(self) -> int:
        return self.w_dense.shape[1]

    @property
    def d_h(self) -> int:
        return self.w_dense.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            w_dense=self.w_dense.copy(),
            b_dense=self.b_dense.copy(),
            heads=[h.copy() for h in self.heads],
            dropout_rate=self.dropout_rate,
        )


@dataclass
class TrainConfig:
    tau: float = 0.05
    lwf_lambda: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lwf_lambda < 0:
            raise ValueError("lwf_lambda must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class ModelSnapshot:
    """Frozen copy of the dense layer plus one designated head."""

    w_dense: np.ndarray
    b_dense: np.ndarray
    head: ClassifierHead | None


@dataclass
class EncoderGrads:
    w_dense: np.ndarray
    b_dense: np.ndarray
    heads: dict[int, np.ndarray] = field(default_factory=dict)

    def scaled_add(self, other: "EncoderGrads", scale: float) -> None:
        self.w_dense += scale * other.w_dense
        self.b_dense += scale * other.b_dense
        for i, g in other.heads.items():
            if i in self.heads:
                self.heads[i] = self.heads[i] + scale * g
            else:
                self.heads[i] = scale * g


def zero_grads(params: EncoderParams) -> EncoderGrads:
    return EncoderGrads(
        w_dense=np.zeros_like(params.w_dense), b_dense=np.zeros_like(params.b_dense)
    )


def init_params(d: int, d_h: int, dropout_rate: float, seed: int) -> EncoderParams:
    # tiny bias keeps tanh outputs off exact zero even if dropout blanks the
    # whole input, which would make cosine similarity undefined
    rng = derive_rng(seed)
    w = rng.standard_normal((d_h, d)) / np.sqrt(d)
    b = 0.01 * rng.standard_normal(d_h)
    return EncoderParams(w_dense=w, b_dense=b, heads=[], dropout_rate=dropout_rate)


def init_head(label_space: list[str] | tuple[str, ...], d_h: int, seed: int) -> ClassifierHead:
    rng = derive_rng(seed)
    w = 0.01 * rng.standard_normal((len(label_space), d_h))
    return ClassifierHead(w=w, label_space=tuple(label_space))


def make_snapshot(params: EncoderParams, head_index: int | None = None) -> ModelSnapshot:
    """Freeze the dense layer plus one head (default: the last, i.e. most
    recently trained; None head if the params carry no heads)."""
    head = None
    if params.heads:
        idx = head_index if head_index is not None else len(params.heads) - 1
        head = params.heads[idx].copy()
    return ModelSnapshot(
        w_dense=params.w_dense.copy(), b_dense=params.b_dense.copy(), head=head
    )


def find_retained_head(params: EncoderParams, snapshot: ModelSnapshot) -> int:
    """Index of the current head sharing the snapshot's label space."""
    if snapshot.head is None:
        raise MissingRetainedHeadError("snapshot carries no head to distill from")
    for i, h in enumerate(params.heads):
        if h.label_space == snapshot.head.label_space:
            return i
    raise MissingRetainedHeadError(
        f"no retained head over label space {snapshot.head.label_space}"
    )


def _dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray | None:
    if rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def _batch_forward(
    params: EncoderParams, X: np.ndarray, mask: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    Xt = X if mask is None else X * mask
    H = np.tanh(Xt @ params.w_dense.T + params.b_dense)
    return Xt, H


def _backprop_dense(
    Xt: np.ndarray, H: np.ndarray, dH: np.ndarray, grads: EncoderGrads
) -> None:
    dZ = dH * (1.0 - H * H)
    grads.w_dense += dZ.T @ Xt
    grads.b_dense += dZ.sum(axis=0)


def forward(
    params: EncoderParams, x: np.ndarray, dropout_seed: int | None = None
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Single-sample forward pass. Without a dropout seed this is a pure
    deterministic function (inference mode); with one, an inverted-dropout
    mask derived from the seed scales the input by 1/(1-p)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d,):
        raise ValueError(f"input has shape {x.shape}, expected ({params.d},)")
    mask = None
    if dropout_seed is not None:
        mask = _dropout_mask(x.shape, params.dropout_rate, derive_rng(dropout_seed))
    xt = x if mask is None else x * mask
    h = np.tanh(params.w_dense @ xt + params.b_dense)
    return h, [head.w @ h for head in params.heads]


def representations(params: EncoderParams, X: np.ndarray) -> np.ndarray:
    """Inference-mode representations for a batch (no dropout)."""
    X = np.asarray(X, dtype=np.float64)
    _, H = _batch_forward(params, X, None)
    return H


def _contrastive_from_reps(
    A: np.ndarray, B: np.ndarray, tau: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """InfoNCE on paired representation views; returns loss and dloss/dA, dB.

    loss = -(1/N) sum_i log[ exp(cos(a_i, b_i)/tau) / sum_j exp(cos(a_i, b_j)/tau) ]
    with the denominator running over all j (positive included).
    """
    n = A.shape[0]
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if na.min() < _NORM_FLOOR or nb.min() < _NORM_FLOOR:
        raise DegenerateRepresentationError("zero-norm representation in contrastive batch")
    Ahat = A / na[:, None]
    Bhat = B / nb[:, None]
    S = Ahat @ Bhat.T
    L = S / tau
    m = L.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(L - m).sum(axis=1, keepdims=True))).ravel()
    loss = float(np.mean(lse - np.diag(L)))
    P = np.exp(L - lse[:, None])
    G = (P - np.eye(n)) / (n * tau)
    row = (G * S).sum(axis=1)
    col = (G * S).sum(axis=0)
    dA = (G @ Bhat - row[:, None] * Ahat) / na[:, None]
    dB = (G.T @ Ahat - col[:, None] * Bhat) / nb[:, None]
    return loss, dA, dB


def ucl_step(
    params: EncoderParams,
    batch: np.ndarray,
    cfg: TrainConfig,
    step_seed: int,
) -> tuple[float, EncoderGrads]:
    """Contrastive loss over two dropout views of the batch, sharing params."""
    X = np.asarray(batch, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError(f"contrastive batch needs >= 2 samples, got {X.shape[0]}")
    mask0 = _dropout_mask(X.shape, params.dropout_rate, derive_rng(step_seed, 0))
    mask1 = _dropout_mask(X.shape, params.dropout_rate, derive_rng(step_seed, 1))
    Xt0, H0 = _batch_forward(params, X, mask0)
    Xt1, H1 = _batch_forward(params, X, mask1)
    loss, dH0, dH1 = _contrastive_from_reps(H0, H1, cfg.tau)
    grads = zero_grads(params)
    _backprop_dense(Xt0, H0, dH0, grads)
    _backprop_dense(Xt1, H1, dH1, grads)
    return loss, grads


def _encode_labels(head: ClassifierHead, labels: list[str]) -> np.ndarray:
    index = {name: i for i, name in enumerate(head.label_space)}
    try:
        return np.array([index[l] for l in labels], dtype=int)
    except KeyError as e:
        raise UnknownLabelError(f"label {e.args[0]!r} not in head label space") from e


def ce_step(
    params: EncoderParams,
    head_index: int,
    batch: np.ndarray,
    labels: list[str],
    cfg: TrainConfig,
    step_seed: int | None = None,
) -> tuple[float, EncoderGrads]:
    """Mean cross-entropy on one head; dropout active when a seed is given."""
    X = np.asarray(batch, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if len(labels) != n:
        raise ValueError(f"{n} samples but {len(labels)} labels")
    head = params.heads[head_index]
    y = _encode_labels(head, labels)
    mask = None
    if step_seed is not None:
        mask = _dropout_mask(X.shape, params.dropout_rate, derive_rng(step_seed, 0))
    Xt, H = _batch_forward(params, X, mask)
    U = H @ head.w.T
    m = U.max(axis=1, keepdims=True)
    logZ = m + np.log(np.exp(U - m).sum(axis=1, keepdims=True))
    logP = U - logZ
    loss = float(-np.mean(logP[np.arange(n), y]))
    dU = np.exp(logP)
    dU[np.arange(n), y] -= 1.0
    dU /= n
    grads = zero_grads(params)
    grads.heads[head_index] = dU.T @ H
    _backprop_dense(Xt, H, dU @ head.w, grads)
    return loss, grads


def _softmax(U: np.ndarray) -> np.ndarray:
    m = U.max(axis=1, keepdims=True)
    e = np.exp(U - m)
    return e / e.sum(axis=1, keepdims=True)


def lwf_step(
    params: EncoderParams,
    head_index: int,
    snapshot: ModelSnapshot,
    batch: np.ndarray,
    cfg: TrainConfig,
    step_seed: int | None = None,
) -> tuple[float, EncoderGrads]:
    """Distillation: cross-entropy between the frozen snapshot's distribution
    and the current model's, through the retained head at ``head_index``.

    Targets are computed without dropout; gradients flow into the dense layer
    and the retained head only.
    """
    X = np.asarray(batch, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if snapshot.head is None:
        raise MissingRetainedHeadError("snapshot carries no head to distill from")
    if not (0 <= head_index < len(params.heads)):
        raise MissingRetainedHeadError(f"no head at index {head_index}")
    retained = params.heads[head_index]
    if retained.label_space != snapshot.head.label_space:
        raise MissingRetainedHeadError(
            "retained head label space does not match snapshot"
        )
    Hs = np.tanh(X @ snapshot.w_dense.T + snapshot.b_dense)
    T = _softmax(Hs @ snapshot.head.w.T)

    mask = None
    if step_seed is not None:
        mask = _dropout_mask(X.shape, params.dropout_rate, derive_rng(step_seed, 0))
    Xt, H = _batch_forward(params, X, mask)
    U = H @ retained.w.T
    m = U.max(axis=1, keepdims=True)
    logZ = m + np.log(np.exp(U - m).sum(axis=1, keepdims=True))
    logQ = U - logZ
    loss = float(-np.mean((T * logQ).sum(axis=1)))
    dU = (np.exp(logQ) - T) / n
    grads = zero_grads(params)
    grads.heads[head_index] = dU.T @ H
    _backprop_dense(Xt, H, dU @ retained.w, grads)
    return loss, grads


def supervised_step(
    params: EncoderParams,
    head_index: int,
    snapshot: ModelSnapshot | None,
    batch: np.ndarray,
    labels: list[str],
    cfg: TrainConfig,
    step_seed: int | None = None,
) -> tuple[float, EncoderGrads]:
    """Cross-entropy plus lambda times distillation against the snapshot.

    With no snapshot (or lambda = 0) this is exactly the cross-entropy step.
    Both components see the same dropout mask, so the combined loss equals
    L_ce + lambda * L_lwf for the separately computed components.
    """
    loss, grads = ce_step(params, head_index, batch, labels, cfg, step_seed)
    lam = cfg.lwf_lambda
    if snapshot is not None and snapshot.head is not None and lam > 0.0:
        retained = find_retained_head(params, snapshot)
        lwf_loss, lwf_grads = lwf_step(params, retained, snapshot, batch, cfg, step_seed)
        loss = loss + lam * lwf_loss
        grads.scaled_add(lwf_grads, lam)
    return loss, grads


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


def apply_update(
    params: EncoderParams,
    grads: EncoderGrads,
    cfg: TrainConfig,
    state: AdamState,
) -> tuple[EncoderParams, AdamState]:
    """Adam update (bias-corrected) of the dense layer and any heads with
    gradients. Parameters are updated in place and returned."""
    state.step += 1
    t = state.step
    named: list[tuple[str, np.ndarray, np.ndarray]] = [
        ("w_dense", params.w_dense, grads.w_dense),
        ("b_dense", params.b_dense, grads.b_dense),
    ]
    for i, g in grads.heads.items():
        head = params.heads[i]
        if g.shape != head.w.shape:
            raise ValueError(f"gradient shape {g.shape} != head shape {head.w.shape}")
        named.append((f"head{i}", head.w, g))
    for key, p, g in named:
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape}")
        m = state.m.setdefault(key, np.zeros_like(p))
        v = state.v.setdefault(key, np.zeros_like(p))
        m *= _ADAM_B1
        m += (1 - _ADAM_B1) * g
        v *= _ADAM_B2
        v += (1 - _ADAM_B2) * g * g
        m_hat = m / (1 - _ADAM_B1**t)
        v_hat = v / (1 - _ADAM_B2**t)
        p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
    return params, state


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    """Write the versioned CDIM binary checkpoint (little-endian f32/u32)."""
    with open(path, "wb") as f:
        f.write(CDIM_MAGIC)
        f.write(struct.pack("<IIIf", CDIM_VERSION, params.d, params.d_h, params.dropout_rate))
        f.write(np.ascontiguousarray(params.w_dense, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(params.b_dense, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(params.heads)))
        for head in params.heads:
            f.write(struct.pack("<I", head.k))
            for name in head.label_space:
                raw = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
            f.write(np.ascontiguousarray(head.w, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> EncoderParams:
    data = Path(path).read_bytes()
    if data[:4] != CDIM_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, d, d_h, dropout = struct.unpack_from("<IIIf", data, 4)
    if version != CDIM_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 4 + 16
    w_dense = np.frombuffer(data, dtype="<f4", count=d_h * d, offset=off).reshape(d_h, d)
    off += 4 * d_h * d
    b_dense = np.frombuffer(data, dtype="<f4", count=d_h, offset=off)
    off += 4 * d_h
    (n_heads,) = struct.unpack_from("<I", data, off)
    off += 4
    heads = []
    for _ in range(n_heads):
        (k,) = struct.unpack_from("<I", data, off)
        off += 4
        names = []
        for _ in range(k):
            (ln,) = struct.unpack_from("<I", data, off)
            off += 4
            names.append(data[off : off + ln].decode("utf-8"))
            off += ln
        w = np.frombuffer(data, dtype="<f4", count=k * d_h, offset=off).reshape(k, d_h)
        off += 4 * k * d_h
        heads.append(ClassifierHead(w=w.astype(np.float64), label_space=tuple(names)))
    return EncoderParams(
        w_dense=w_dense.astype(np.float64),
        b_dense=b_dense.astype(np.float64),
        heads=heads,
        dropout_rate=float(dropout),
    )
