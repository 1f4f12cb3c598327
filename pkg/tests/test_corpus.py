import json

import numpy as np
import pytest

from cdi.corpus import (
    CorpusError,
    SplitSpec,
    load_corpus,
    make_synthetic_blobs,
    read_cdie,
    save_corpus,
    split_known_ratio,
    write_cdie,
)


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")


@pytest.fixture
def tiny_files(tmp_path):
    rows = [
        {"id": "a", "text": "hello", "label": "greet"},
        {"id": "b", "text": "bye", "label": "farewell"},
        {"id": "c", "text": "hi there", "label": "greet"},
    ]
    emb = np.arange(12, dtype=np.float32).reshape(3, 4)
    ds, ce = tmp_path / "d.jsonl", tmp_path / "d.cdie"
    _write_jsonl(ds, rows)
    write_cdie(ce, emb)
    return ds, ce, emb


def test_load_corpus_counts(tiny_files):
    ds, ce, emb = tiny_files
    corpus = load_corpus(ds, ce)
    assert corpus.n == 3
    assert corpus.dim == 4
    assert corpus.vocab == ["greet", "farewell"]
    np.testing.assert_array_equal(corpus.embedding_matrix(), emb)


def test_load_corpus_count_mismatch(tmp_path, tiny_files):
    ds, ce, _ = tiny_files
    short = tmp_path / "short.jsonl"
    _write_jsonl(short, [{"id": "a", "text": "x", "label": None},
                         {"id": "b", "text": "y", "label": None}])
    with pytest.raises(CorpusError, match="count mismatch"):
        load_corpus(short, ce)


def test_load_corpus_nan_names_row(tmp_path, tiny_files):
    ds, _, emb = tiny_files
    bad = emb.copy()
    bad[1, 2] = np.nan
    ce = tmp_path / "bad.cdie"
    write_cdie(ce, bad)
    with pytest.raises(CorpusError, match="row 1"):
        load_corpus(ds, ce)


def test_load_corpus_duplicate_id(tmp_path, tiny_files):
    _, ce, _ = tiny_files
    ds = tmp_path / "dup.jsonl"
    _write_jsonl(ds, [{"id": "a", "text": "x", "label": None},
                      {"id": "a", "text": "y", "label": None},
                      {"id": "c", "text": "z", "label": None}])
    with pytest.raises(CorpusError, match="duplicate"):
        load_corpus(ds, ce)


def test_cdie_truncated_payload(tmp_path, tiny_files):
    _, ce, _ = tiny_files
    data = ce.read_bytes()
    trunc = tmp_path / "t.cdie"
    trunc.write_bytes(data[:-4])
    with pytest.raises(CorpusError, match="size mismatch"):
        read_cdie(trunc)


def test_save_load_round_trip_bit_exact(tmp_path):
    corpus = make_synthetic_blobs(50, 3, 6, separation=2.0, noise_sigma=0.7, seed=5)
    ds, ce = tmp_path / "r.jsonl", tmp_path / "r.cdie"
    save_corpus(corpus, ds, ce)
    again = load_corpus(ds, ce)
    assert again.embedding_matrix().tobytes() == corpus.embedding_matrix().tobytes()
    assert again.ids == corpus.ids
    assert [u.gold_label for u in again.utterances] == [
        u.gold_label for u in corpus.utterances
    ]
    # and writing again reproduces identical bytes
    ce2 = tmp_path / "r2.cdie"
    save_corpus(again, tmp_path / "r2.jsonl", ce2)
    assert ce2.read_bytes() == ce.read_bytes()


class TestSplitKnownRatio:
    def test_known_count_ceiling(self):
        corpus = make_synthetic_blobs(40, 4, 4, 5.0, 0.5, seed=0)
        _, _, known = split_known_ratio(corpus, SplitSpec(0.5, 0.5, seed=3))
        assert len(known) == 2

    def test_full_ratio_labels_everything(self):
        corpus = make_synthetic_blobs(30, 3, 4, 5.0, 0.5, seed=0)
        labeled, unlabeled, known = split_known_ratio(corpus, SplitSpec(1.0, 1.0, seed=9))
        assert labeled == set(corpus.ids)
        assert unlabeled == set()
        assert known == set(corpus.vocab)

    def test_partition_and_membership(self):
        corpus = make_synthetic_blobs(60, 5, 4, 5.0, 0.5, seed=2)
        labeled, unlabeled, known = split_known_ratio(corpus, SplitSpec(0.6, 0.4, seed=11))
        assert labeled | unlabeled == set(corpus.ids)
        assert labeled & unlabeled == set()
        for i in labeled:
            assert corpus.utterances[corpus.index_of(i)].gold_label in known

    def test_deterministic_and_seed_sensitive(self):
        corpus = make_synthetic_blobs(80, 8, 4, 5.0, 0.5, seed=4)
        a = split_known_ratio(corpus, SplitSpec(0.5, 0.5, seed=7))
        b = split_known_ratio(corpus, SplitSpec(0.5, 0.5, seed=7))
        c = split_known_ratio(corpus, SplitSpec(0.5, 0.5, seed=8))
        assert a == b
        assert a != c

    def test_requires_gold_labels(self, tiny_files, tmp_path):
        ds = tmp_path / "nolabel.jsonl"
        _write_jsonl(ds, [{"id": "a", "text": "x", "label": None},
                          {"id": "b", "text": "y", "label": "q"},
                          {"id": "c", "text": "z", "label": "q"}])
        corpus = load_corpus(ds, tiny_files[1])
        with pytest.raises(CorpusError, match="gold labels"):
            split_known_ratio(corpus, SplitSpec(0.5, 0.5, seed=1))


def _nearest_center_accuracy(corpus, centers):
    # brute-force oracle: classify each embedding by its nearest center
    X = corpus.embedding_matrix().astype(np.float64)
    gold = np.array([int(u.gold_label) for u in corpus.utterances])
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == gold))


def _recover_centers(corpus, k):
    X = corpus.embedding_matrix().astype(np.float64)
    gold = np.array([int(u.gold_label) for u in corpus.utterances])
    return np.stack([X[gold == c].mean(axis=0) for c in range(k)])


class TestSyntheticBlobs:
    def test_single_cluster(self):
        corpus = make_synthetic_blobs(10, 1, 5, separation=3.0, noise_sigma=0.2, seed=1)
        assert corpus.dim == 5
        assert {u.gold_label for u in corpus.utterances} == {"0"}

    def test_separated_blobs_recoverable(self):
        corpus = make_synthetic_blobs(100, 4, 8, separation=10.0, noise_sigma=0.1, seed=3)
        centers = _recover_centers(corpus, 4)
        assert _nearest_center_accuracy(corpus, centers) == 1.0

    def test_zero_separation_is_chance(self):
        corpus = make_synthetic_blobs(100, 4, 8, separation=0.0, noise_sigma=0.1, seed=3)
        centers = _recover_centers(corpus, 4)
        acc = _nearest_center_accuracy(corpus, centers)
        assert abs(acc - 0.25) < 0.15

    def test_round_robin_balances_sizes(self):
        corpus = make_synthetic_blobs(103, 4, 4, 5.0, 0.5, seed=0)
        counts = {}
        for u in corpus.utterances:
            counts[u.gold_label] = counts.get(u.gold_label, 0) + 1
        assert max(counts.values()) - min(counts.values()) <= 1

    def test_preconditions(self):
        with pytest.raises(ValueError):
            make_synthetic_blobs(3, 5, 4, 1.0, 0.1, seed=0)
        with pytest.raises(ValueError):
            make_synthetic_blobs(10, 2, 1, 1.0, 0.1, seed=0)
