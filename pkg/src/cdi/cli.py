"""Batch entry points: fixture synthesis, ingestion, known-ratio benchmarks,
oracle-driven discovery runs, and the HTTP service.

Configuration can come from a JSON file (--config, mirroring the session
config shape) with individual flags overriding file values. The store
directory defaults to $CDI_STORE.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .corpus import (
    CorpusError,
    SplitSpec,
    load_corpus,
    make_synthetic_blobs,
    save_corpus,
    split_known_ratio,
)
from .discovery import (
    DiscoveryConfig,
    advance_iteration,
    apply_feedback,
    init_session,
    propose_clusters,
    should_terminate,
    simulated_oracle,
)
from .encoder import TrainConfig, init_params
from .pipeline import PipelineConfig, evaluate, run_stage1, run_stage2, run_ucl
from .service import create_app, default_store_path


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override)")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lwf-lambda", type=float)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--dropout-rate", type=float)
    p.add_argument("--fixed-k", type=int)
    p.add_argument("--k-prime", type=int)
    p.add_argument("--stage2-max-rounds", type=int)
    p.add_argument("--stage2-epochs-per-round", type=int)


_TRAIN_KEYS = {
    "seed": ("train", "seed"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "learning_rate": ("train", "learning_rate"),
    "tau": ("train", "tau"),
    "lwf_lambda": ("train", "lwf_lambda"),
    "hidden_dim": ("pipeline", "hidden_dim"),
    "dropout_rate": ("pipeline", "dropout_rate"),
    "fixed_k": ("pipeline", "fixed_k"),
    "stage2_max_rounds": ("pipeline", "stage2_max_rounds"),
    "stage2_epochs_per_round": ("pipeline", "stage2_epochs_per_round"),
}


def _discovery_config(args: argparse.Namespace) -> DiscoveryConfig:
    obj: dict = {}
    if getattr(args, "config", None):
        obj = json.loads(Path(args.config).read_text())
    obj.setdefault("pipeline", {}).setdefault("train", {})
    for flag, (section, key) in _TRAIN_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            target = obj["pipeline"]["train"] if section == "train" else obj["pipeline"]
            target[key] = val
    for flag in ("gamma_first", "gamma_rest", "k_prime", "max_iterations", "top_fraction", "top_window", "patience"):
        val = getattr(args, flag, None)
        if val is not None:
            obj[flag] = val
    if getattr(args, "oracle", False):
        obj["oracle_mode"] = True
    return DiscoveryConfig.from_dict(obj)


def _load(args: argparse.Namespace):
    try:
        return load_corpus(args.dataset, args.embeddings)
    except (CorpusError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(1)


def cmd_synth(args: argparse.Namespace) -> int:
    corpus = make_synthetic_blobs(
        args.n, args.k, args.dim, args.separation, args.noise_sigma, args.seed
    )
    out = Path(args.out)
    save_corpus(corpus, out.with_suffix(".jsonl"), out.with_suffix(".cdie"))
    print(f"wrote {out.with_suffix('.jsonl')} and {out.with_suffix('.cdie')} "
          f"(n={corpus.n}, k={len(corpus.vocab)}, dim={corpus.dim})")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    from .service import SessionStore

    try:
        corpus = load_corpus(args.dataset, args.embeddings)
    except (CorpusError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    store = SessionStore(args.store)
    corpus_id, _ = store.register_corpus(
        Path(args.dataset).read_bytes(), Path(args.embeddings).read_bytes()
    )
    print(f"registered corpus {corpus_id} (n={corpus.n}, dim={corpus.dim}, "
          f"labels={len(corpus.vocab)})")
    return 0


def _append_run_log(path: str | None, reports, pcfg: PipelineConfig, **extra) -> None:
    """Append stage reports as JSON lines (config echo and seeds included)."""
    if not path:
        return
    with open(path, "a", encoding="utf-8") as f:
        for report in reports:
            obj = report.to_json_obj(pcfg)
            obj.update(extra)
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def _benchmark_one(corpus, known_ratio, labeled_frac, seed, cfg: DiscoveryConfig):
    pcfg = PipelineConfig(
        train=TrainConfig(
            tau=cfg.pipeline.train.tau,
            lwf_lambda=cfg.pipeline.train.lwf_lambda,
            learning_rate=cfg.pipeline.train.learning_rate,
            batch_size=cfg.pipeline.train.batch_size,
            epochs=cfg.pipeline.train.epochs,
            seed=seed,
        ),
        stage2_max_rounds=cfg.pipeline.stage2_max_rounds,
        stage2_change_tol=cfg.pipeline.stage2_change_tol,
        fixed_k=cfg.pipeline.fixed_k,
        k_prime=cfg.pipeline.k_prime,
        hidden_dim=cfg.pipeline.hidden_dim,
        dropout_rate=cfg.pipeline.dropout_rate,
        stage2_epochs_per_round=cfg.pipeline.stage2_epochs_per_round,
        eval_seed=cfg.pipeline.eval_seed,
    )
    labeled, _, known = split_known_ratio(
        corpus, SplitSpec(known_ratio, labeled_frac, seed)
    )
    X = corpus.embedding_matrix()
    gold = [u.gold_label for u in corpus.utterances]
    params = init_params(corpus.dim, pcfg.hidden_dim, pcfg.dropout_rate, seed)
    params, rep_ucl = run_ucl(X, params, pcfg)
    labeled_ids = [i for i in corpus.ids if i in labeled]  # corpus order
    X_l = corpus.embeddings_for(labeled_ids)
    y_l = [g for g in corpus.gold_for(labeled_ids)]
    label_space = [l for l in corpus.vocab if l in known]
    params, rep1 = run_stage1(params, X_l, y_l, label_space, params, pcfg)
    k = pcfg.fixed_k if pcfg.fixed_k is not None else len(corpus.vocab)
    m1 = evaluate(params, X, gold, k, pcfg.eval_seed)
    rep1.metrics = m1
    params, _, rep2 = run_stage2(params, X, k, params, pcfg)
    m2 = evaluate(params, X, gold, k, pcfg.eval_seed)
    rep2.metrics = m2
    return m1, m2, (rep_ucl, rep1, rep2), pcfg


def cmd_benchmark(args: argparse.Namespace) -> int:
    corpus = _load(args)
    if not corpus.has_gold_labels():
        print("error: benchmark requires gold labels on every utterance", file=sys.stderr)
        return 1
    cfg = _discovery_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = []
    for seed in seeds:
        m1, m2, reports, pcfg = _benchmark_one(
            corpus, args.known_ratio, args.labeled_frac, seed, cfg
        )
        _append_run_log(args.run_log, reports, pcfg,
                        known_ratio=args.known_ratio, labeled_frac=args.labeled_frac)
        rows.append({"seed": seed, "stage1": m1, "stage2": m2})
    mean1 = tuple(float(np.mean([r["stage1"][i] for r in rows])) for i in range(3))
    mean2 = tuple(float(np.mean([r["stage2"][i] for r in rows])) for i in range(3))
    if args.json:
        print(json.dumps({
            "known_ratio": args.known_ratio,
            "labeled_frac": args.labeled_frac,
            "rows": [
                {"seed": r["seed"],
                 "stage1": dict(zip(("acc", "ari", "nmi"), r["stage1"])),
                 "stage2": dict(zip(("acc", "ari", "nmi"), r["stage2"]))}
                for r in rows
            ],
            "mean": {"stage1": dict(zip(("acc", "ari", "nmi"), mean1)),
                     "stage2": dict(zip(("acc", "ari", "nmi"), mean2))},
        }, sort_keys=True))
        return 0
    print(f"known_ratio={args.known_ratio} labeled_frac={args.labeled_frac}")
    print(f"{'seed':>6} {'stage':>7} {'ACC':>8} {'ARI':>8} {'NMI':>8}")
    for r in rows:
        for stage in ("stage1", "stage2"):
            a, ri, nm = r[stage]
            print(f"{r['seed']:>6} {stage:>7} {a:>8.4f} {ri:>8.4f} {nm:>8.4f}")
    for stage, m in (("stage1", mean1), ("stage2", mean2)):
        print(f"{'mean':>6} {stage:>7} {m[0]:>8.4f} {m[1]:>8.4f} {m[2]:>8.4f}")
    return 0


def cmd_discover(args: argparse.Namespace) -> int:
    corpus = _load(args)
    cfg = _discovery_config(args)
    if cfg.oracle_mode and not corpus.has_gold_labels():
        print("error: --oracle requires gold labels", file=sys.stderr)
        return 1
    if not cfg.oracle_mode:
        print("error: interactive discovery runs through `serve`; pass --oracle here",
              file=sys.stderr)
        return 2
    session = init_session(corpus, cfg)
    out_rows = []
    if not args.json:
        print(f"{'iter':>5} {'ACC':>8} {'ARI':>8} {'NMI':>8} {'%labeled':>9} {'K':>5} {'intents':>8}")
    while True:
        done, reason = should_terminate(session)
        if done:
            break
        if session.iteration > cfg.max_iterations:
            print(f"error: not converged within {cfg.max_iterations} iterations",
                  file=sys.stderr)
            return 1
        proposals = propose_clusters(session)
        feedback = simulated_oracle(session, proposals)
        for c in feedback.clusters:  # oracle purity is a hard guarantee
            for i in c.accepted:
                gold = corpus.utterances[corpus.index_of(i)].gold_label
                assert gold == c.intent, f"oracle assigned {c.intent!r} to gold {gold!r}"
        if not any(c.accepted for c in feedback.clusters):
            print("error: no samples passed the confidence filter; "
                  "lower gamma_rest or revisit k_prime", file=sys.stderr)
            return 1
        apply_feedback(session, feedback)
        advance_iteration(session)
        rec = session.history[-1]
        _append_run_log(args.run_log, rec.stage_reports, cfg.pipeline,
                        iteration=rec.iteration)
        acc, ri, nm = rec.metrics if rec.metrics else (float("nan"),) * 3
        out_rows.append(rec.to_json_obj())
        if not args.json:
            print(f"{rec.iteration:>5} {acc:>8.4f} {ri:>8.4f} {nm:>8.4f} "
                  f"{100 * rec.labeled_fraction:>8.2f}% {rec.k_used:>5} {rec.intent_count:>8}")
    if args.save_model:
        from .encoder import save_checkpoint

        save_checkpoint(session.params, args.save_model)
    done, reason = should_terminate(session)
    final_metrics = None
    if corpus.has_gold_labels():
        gold = [u.gold_label for u in corpus.utterances]
        final_metrics = evaluate(
            session.params, corpus.embedding_matrix(), gold, session.k_t,
            cfg.pipeline.eval_seed,
        )
    if args.json:
        print(json.dumps({
            "iterations": out_rows,
            "terminated": reason,
            "intents": session.intents,
            "k": session.k_t,
            "labeled_fraction": session.labeled_fraction,
            "final": None if final_metrics is None else dict(
                zip(("acc", "ari", "nmi"), final_metrics)
            ),
        }, sort_keys=True))
    else:
        print(f"terminated: {reason} (|I|={len(session.intents)}, K={session.k_t}, "
              f"labeled={100 * session.labeled_fraction:.2f}%)")
        if final_metrics is not None:
            a, ri, nm = final_metrics
            print(f"final evaluation at K={session.k_t}: ACC={a:.4f} ARI={ri:.4f} NMI={nm:.4f}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    host, _, port = args.bind.rpartition(":")
    app = create_app(args.store)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cdi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a synthetic blob corpus (JSONL + CDIE)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", help="validate and register a corpus in the store")
    p.add_argument("--dataset", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--store", default=str(default_store_path()))
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("benchmark", help="known-ratio benchmark with fixed ground-truth K")
    p.add_argument("--dataset", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--known-ratio", type=float, required=True)
    p.add_argument("--labeled-frac", type=float, default=0.1)
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.add_argument("--json", action="store_true")
    p.add_argument("--run-log", help="append per-stage reports to this JSONL file")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("discover", help="oracle-driven incremental discovery run")
    p.add_argument("--dataset", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--json", action="store_true")
    p.add_argument("--run-log", help="append per-stage reports to this JSONL file")
    p.add_argument("--save-model", help="write the final encoder checkpoint here")
    p.add_argument("--gamma-first", type=float, dest="gamma_first")
    p.add_argument("--gamma-rest", type=float, dest="gamma_rest")
    p.add_argument("--max-iterations", type=int, dest="max_iterations")
    p.add_argument("--top-fraction", type=float, dest="top_fraction")
    p.add_argument("--top-window", type=int, dest="top_window")
    p.add_argument("--patience", type=int, dest="patience")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_discover)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--bind", default="127.0.0.1:8000")
    p.add_argument("--store", default=str(default_store_path()))
    p.set_defaults(fn=cmd_serve)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CorpusError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
