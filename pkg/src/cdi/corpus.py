"""Corpus loading, validation, splitting, and synthetic fixtures.

A corpus pairs a JSON-lines utterance file with a binary embedding file
(CDIE format). Embeddings are frozen 32-bit floats on disk; downstream
training widens to float64 internally.

CDIE layout, all little-endian: magic ``CDIE`` (4 bytes), format version
u32=1, count u32, dim u32, then count*dim IEEE-754 f32 values row-major.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._seed import SplitMix64, derive_rng

CDIE_MAGIC = b"CDIE"
CDIE_VERSION = 1


class CorpusError(ValueError):
    """Raised for malformed dataset/embedding files or invalid corpora."""


@dataclass
class Utterance:
    id: str
    text: str
    gold_label: str | None
    base_embedding: np.ndarray  # (d,) float32


@dataclass
class Corpus:
    """Immutable-after-load collection of utterances with embeddings."""

    utterances: list[Utterance]
    dim: int
    vocab: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.dim < 2:
            raise CorpusError(f"embedding dimension must be >= 2, got {self.dim}")
        if not self.utterances:
            raise CorpusError("corpus must contain at least one utterance")
        seen: set[str] = set()
        vocab: list[str] = []
        vseen: set[str] = set()
        for i, utt in enumerate(self.utterances):
            if utt.id in seen:
                raise CorpusError(f"duplicate utterance id {utt.id!r} at line {i + 1}")
            seen.add(utt.id)
            if utt.base_embedding.shape != (self.dim,):
                raise CorpusError(
                    f"row {i}: embedding length {utt.base_embedding.shape} != dim {self.dim}"
                )
            if not np.all(np.isfinite(utt.base_embedding)):
                raise CorpusError(f"row {i}: non-finite embedding value")
            if utt.gold_label is not None and utt.gold_label not in vseen:
                vseen.add(utt.gold_label)
                vocab.append(utt.gold_label)
        self.vocab = vocab
        self._index = {u.id: i for i, u in enumerate(self.utterances)}
        self._matrix = np.stack([u.base_embedding for u in self.utterances]).astype(
            np.float32
        )

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def n(self) -> int:
        return len(self.utterances)

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.utterances]

    def embedding_matrix(self) -> np.ndarray:
        """(N, d) float32 view of all base embeddings, corpus order."""
        return self._matrix

    def index_of(self, utterance_id: str) -> int:
        return self._index[utterance_id]

    def embeddings_for(self, ids: list[str]) -> np.ndarray:
        return self._matrix[[self._index[i] for i in ids]]

    def gold_for(self, ids: list[str]) -> list[str | None]:
        return [self.utterances[self._index[i]].gold_label for i in ids]

    def has_gold_labels(self) -> bool:
        return all(u.gold_label is not None for u in self.utterances)


@dataclass
class SplitSpec:
    """Known-intent-ratio split: which labels are revealed, and how much of
    each revealed label's data is treated as labeled."""

    known_ratio: float
    labeled_fraction: float
    seed: int

    def __post_init__(self):
        for name, v in (("known_ratio", self.known_ratio), ("labeled_fraction", self.labeled_fraction)):
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {v}")


def write_cdie(path: str | Path, embeddings: np.ndarray) -> None:
    """Write an (N, d) float array as a CDIE file (f32 little-endian)."""
    arr = np.ascontiguousarray(embeddings, dtype="<f4")
    if arr.ndim != 2:
        raise CorpusError("embeddings must be a 2-D array")
    count, dim = arr.shape
    with open(path, "wb") as f:
        f.write(CDIE_MAGIC)
        f.write(struct.pack("<III", CDIE_VERSION, count, dim))
        f.write(arr.tobytes(order="C"))


def read_cdie(path: str | Path) -> np.ndarray:
    """Read a CDIE file into an (N, d) float32 array, validating the header."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise CorpusError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != CDIE_MAGIC:
        raise CorpusError(f"{path}: bad magic {data[:4]!r}, expected {CDIE_MAGIC!r}")
    version, count, dim = struct.unpack_from("<III", data, 4)
    if version != CDIE_VERSION:
        raise CorpusError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * count * dim
    if len(data) != expected:
        raise CorpusError(
            f"{path}: payload size mismatch, header says {count}x{dim} "
            f"({expected} bytes total) but file has {len(data)} bytes"
        )
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(count, dim)
    return arr.copy()


def load_corpus(dataset_path: str | Path, embeddings_path: str | Path) -> Corpus:
    """Join a JSONL utterance file with its CDIE embedding file, row by row.

    Line i of the dataset owns row i of the embedding matrix. Count or
    dimension disagreements, non-finite values, and duplicate ids are all
    rejected with the offending line/row named.
    """
    emb = read_cdie(embeddings_path)
    count, dim = emb.shape
    if dim < 2:
        raise CorpusError(f"{embeddings_path}: dim must be >= 2, got {dim}")

    utterances: list[Utterance] = []
    with open(dataset_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{dataset_path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise CorpusError(f"{dataset_path}:{lineno}: object must have 'id' and 'text'")
            label = obj.get("label")
            if label is not None and not isinstance(label, str):
                raise CorpusError(f"{dataset_path}:{lineno}: 'label' must be string or null")
            row = len(utterances)
            if row >= count:
                raise CorpusError(
                    f"count mismatch: embeddings file declares {count} rows but "
                    f"{dataset_path} has more lines (line {lineno})"
                )
            if not np.all(np.isfinite(emb[row])):
                raise CorpusError(f"{embeddings_path}: non-finite value at row {row}")
            utterances.append(
                Utterance(
                    id=str(obj["id"]),
                    text=str(obj["text"]),
                    gold_label=label,
                    base_embedding=emb[row],
                )
            )
    if len(utterances) != count:
        raise CorpusError(
            f"count mismatch: embeddings file declares {count} rows but "
            f"{dataset_path} has {len(utterances)} records"
        )
    return Corpus(utterances=utterances, dim=dim)


def save_corpus(corpus: Corpus, dataset_path: str | Path, embeddings_path: str | Path) -> None:
    """Inverse of load_corpus; embedding bytes round-trip exactly (f32 LE)."""
    with open(dataset_path, "w", encoding="utf-8") as f:
        for u in corpus.utterances:
            f.write(
                json.dumps(
                    {"id": u.id, "text": u.text, "label": u.gold_label},
                    ensure_ascii=False,
                )
                + "\n"
            )
    write_cdie(embeddings_path, corpus.embedding_matrix())


def split_known_ratio(
    corpus: Corpus, spec: SplitSpec
) -> tuple[set[str], set[str], set[str]]:
    """Partition ids into (labeled, unlabeled) by revealing a ratio of intents.

    ceil(known_ratio * |vocab|) intents are chosen uniformly by seed; for each,
    ceil(labeled_fraction * count) of its utterances become labeled. The rest
    of the corpus is unlabeled. Deterministic for a fixed seed (SplitMix64).
    """
    if not corpus.has_gold_labels():
        raise CorpusError("split requires gold labels on every utterance")
    rng = SplitMix64(spec.seed)
    vocab = list(corpus.vocab)
    rng.shuffle(vocab)
    n_known = math.ceil(spec.known_ratio * len(corpus.vocab))
    known = vocab[:n_known]
    known_set = set(known)

    by_label: dict[str, list[str]] = {}
    for u in corpus.utterances:
        by_label.setdefault(u.gold_label, []).append(u.id)

    labeled: set[str] = set()
    for label in known:  # shuffled order, deterministic
        ids = list(by_label[label])
        rng.shuffle(ids)
        take = math.ceil(spec.labeled_fraction * len(ids))
        labeled.update(ids[:take])
    unlabeled = {u.id for u in corpus.utterances} - labeled
    return labeled, unlabeled, known_set


def make_synthetic_blobs(
    n: int,
    k: int,
    dim: int,
    separation: float,
    noise_sigma: float,
    seed: int,
) -> Corpus:
    """Gaussian-blob corpus: k centers on a sphere of radius ``separation``,
    points assigned round-robin so cluster sizes stay balanced."""
    if not (n >= k >= 1):
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if noise_sigma <= 0:
        raise ValueError("noise_sigma must be positive")
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    rng = derive_rng(seed)
    directions = rng.standard_normal((k, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = directions * separation
    utterances = []
    for i in range(n):
        c = i % k
        emb = centers[c] + noise_sigma * rng.standard_normal(dim)
        utterances.append(
            Utterance(
                id=f"u{i:06d}",
                text=f"synthetic utterance {i} (blob {c})",
                gold_label=str(c),
                base_embedding=emb.astype(np.float32),
            )
        )
    return Corpus(utterances=utterances, dim=dim)
