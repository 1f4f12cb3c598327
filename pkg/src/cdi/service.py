"""HTTP facade over discovery sessions.

Persistence is an append-only JSON-lines event log per session plus a pickle
checkpoint written after every applied event; restart replays the log (from
the latest checkpoint) so a killed process loses at most the in-flight
mutation. Mutations are idempotent through client-supplied request ids and
serialized per session: a second concurrent mutation gets 409, never a
corrupted state. Long-running iteration training is asynchronous: the
endpoint returns 202 with a job id to poll.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, UploadFile
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .corpus import Corpus, CorpusError, load_corpus
from .discovery import (
    STATUS_CONVERGED,
    DiscoveryConfig,
    Feedback,
    FeedbackValidationError,
    SessionState,
    UnknownClusterError,
    advance_iteration,
    apply_feedback,
    init_session,
    propose_clusters,
    replay_events,
    should_terminate,
)

log = logging.getLogger(__name__)

_MUTATION_EVENTS = ("feedback_applied", "iteration_advanced", "finalized")


@dataclass
class SessionHandle:
    session_id: str
    created_at: float
    corpus_fingerprint: str


@dataclass
class LiveSession:
    session: SessionState
    handle: SessionHandle
    corpus_id: str
    events_path: Path
    checkpoint_path: Path
    lock: threading.Lock = field(default_factory=threading.Lock)
    applied_request_ids: dict[str, str | None] = field(default_factory=dict)
    event_count: int = 0


class SessionStore:
    """Owns corpora and sessions under one directory; crash-safe."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "corpora").mkdir(parents=True, exist_ok=True)
        (self.root / "sessions").mkdir(parents=True, exist_ok=True)
        self._corpora: dict[str, tuple[Corpus, str]] = {}
        self._sessions: dict[str, LiveSession] = {}
        self._jobs: dict[str, dict] = {}
        self._lock = threading.Lock()

    # -- corpora ---------------------------------------------------------

    def register_corpus(self, dataset_bytes: bytes, embedding_bytes: bytes) -> tuple[str, Corpus]:
        fingerprint = hashlib.sha256(dataset_bytes + embedding_bytes).hexdigest()
        corpus_id = fingerprint[:16]
        cdir = self.root / "corpora"
        ds, emb = cdir / f"{corpus_id}.jsonl", cdir / f"{corpus_id}.cdie"
        if not ds.exists():
            ds.write_bytes(dataset_bytes)
            emb.write_bytes(embedding_bytes)
        corpus = load_corpus(ds, emb)  # validates; raises CorpusError if bad
        with self._lock:
            self._corpora[corpus_id] = (corpus, fingerprint)
        return corpus_id, corpus

    def get_corpus(self, corpus_id: str) -> tuple[Corpus, str]:
        with self._lock:
            if corpus_id in self._corpora:
                return self._corpora[corpus_id]
        ds = self.root / "corpora" / f"{corpus_id}.jsonl"
        emb = self.root / "corpora" / f"{corpus_id}.cdie"
        if not ds.exists() or not emb.exists():
            raise KeyError(corpus_id)
        corpus = load_corpus(ds, emb)
        fingerprint = hashlib.sha256(ds.read_bytes() + emb.read_bytes()).hexdigest()
        with self._lock:
            self._corpora[corpus_id] = (corpus, fingerprint)
        return corpus, fingerprint

    # -- event log -------------------------------------------------------

    def _append_event(self, live: LiveSession, kind: str, payload: dict) -> None:
        record = {
            "type": kind,
            "ts": time.time(),
            "seed": live.session.config.pipeline.train.seed,
            "payload": payload,
        }
        with open(live.events_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record) + "\n")
            f.flush()
            os.fsync(f.fileno())
        live.event_count += 1
        self._write_checkpoint(live)

    def _write_checkpoint(self, live: LiveSession) -> None:
        state = live.session.__dict__.copy()
        state["corpus"] = None  # reloaded from the store on restore
        blob = pickle.dumps(
            {
                "event_count": live.event_count,
                "state": state,
                "applied_request_ids": live.applied_request_ids,
                "handle": live.handle,
                "corpus_id": live.corpus_id,
            }
        )
        tmp = live.checkpoint_path.with_suffix(".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, live.checkpoint_path)

    # -- sessions --------------------------------------------------------

    def create_session(
        self, corpus_id: str, config: DiscoveryConfig, request_id: str | None = None
    ) -> LiveSession:
        corpus, fingerprint = self.get_corpus(corpus_id)
        session_id = uuid.uuid4().hex[:12]
        sdir = self.root / "sessions" / session_id
        sdir.mkdir(parents=True)
        session = init_session(corpus, config)
        live = LiveSession(
            session=session,
            handle=SessionHandle(
                session_id=session_id,
                created_at=time.time(),
                corpus_fingerprint=fingerprint,
            ),
            corpus_id=corpus_id,
            events_path=sdir / "events.jsonl",
            checkpoint_path=sdir / "checkpoint.pkl",
        )
        (sdir / "meta.json").write_text(
            json.dumps(
                {
                    "session_id": session_id,
                    "corpus_id": corpus_id,
                    "created_at": live.handle.created_at,
                    "corpus_fingerprint": fingerprint,
                }
            )
        )
        self._append_event(
            live,
            "session_created",
            {
                "session_id": session_id,
                "corpus_id": corpus_id,
                "corpus_fingerprint": fingerprint,
                "config": config.to_dict(),
                "request_id": request_id,
            },
        )
        with self._lock:
            self._sessions[session_id] = live
        return live

    def get_session(self, session_id: str) -> LiveSession:
        with self._lock:
            if session_id in self._sessions:
                return self._sessions[session_id]
        live = self._restore_session(session_id)
        with self._lock:
            self._sessions[session_id] = live
        return live

    def list_sessions(self) -> list[str]:
        on_disk = {p.name for p in (self.root / "sessions").iterdir() if p.is_dir()}
        with self._lock:
            return sorted(on_disk | set(self._sessions))

    def _restore_session(self, session_id: str) -> LiveSession:
        sdir = self.root / "sessions" / session_id
        meta_path = sdir / "meta.json"
        events_path = sdir / "events.jsonl"
        if not meta_path.exists() or not events_path.exists():
            raise KeyError(session_id)
        meta = json.loads(meta_path.read_text())
        corpus, fingerprint = self.get_corpus(meta["corpus_id"])
        events = [
            json.loads(line)
            for line in events_path.read_text().splitlines()
            if line.strip()
        ]
        ckpt_path = sdir / "checkpoint.pkl"
        live: LiveSession | None = None
        if ckpt_path.exists():
            try:
                blob = pickle.loads(ckpt_path.read_bytes())
                if blob["event_count"] <= len(events):
                    session = SessionState(**{**blob["state"], "corpus": corpus})
                    live = LiveSession(
                        session=session,
                        handle=blob["handle"],
                        corpus_id=blob["corpus_id"],
                        events_path=events_path,
                        checkpoint_path=ckpt_path,
                        applied_request_ids=blob["applied_request_ids"],
                        event_count=blob["event_count"],
                    )
                    for ev in events[blob["event_count"]:]:
                        self._apply_event(live, ev)
            except Exception:
                log.warning("checkpoint unusable for %s; replaying full log", session_id)
                live = None
        if live is None:
            session = replay_events(corpus, events)
            live = LiveSession(
                session=session,
                handle=SessionHandle(
                    session_id=session_id,
                    created_at=meta["created_at"],
                    corpus_fingerprint=fingerprint,
                ),
                corpus_id=meta["corpus_id"],
                events_path=events_path,
                checkpoint_path=ckpt_path,
                event_count=len(events),
            )
            for ev in events:
                rid = (ev.get("payload") or {}).get("request_id")
                if rid and ev["type"] in _MUTATION_EVENTS:
                    live.applied_request_ids[rid] = None
        return live

    def _apply_event(self, live: LiveSession, ev: dict) -> None:
        kind = ev["type"]
        payload = ev.get("payload") or {}
        if kind == "feedback_applied":
            apply_feedback(live.session, Feedback.from_json_obj(payload["feedback"]))
        elif kind == "iteration_advanced":
            advance_iteration(live.session)
        elif kind == "finalized":
            live.session.finalized = True
            live.session.status = STATUS_CONVERGED
        else:
            raise ValueError(f"unknown event type {kind!r}")
        rid = payload.get("request_id")
        if rid:
            live.applied_request_ids[rid] = None
        live.event_count += 1

    # -- jobs --------------------------------------------------------------

    def create_job(self) -> str:
        job_id = uuid.uuid4().hex[:12]
        with self._lock:
            self._jobs[job_id] = {"status": "queued"}
        return job_id

    def update_job(self, job_id: str, **fields) -> None:
        with self._lock:
            self._jobs[job_id].update(fields)

    def get_job(self, job_id: str) -> dict:
        with self._lock:
            if job_id not in self._jobs:
                raise KeyError(job_id)
            return dict(self._jobs[job_id])


class FeedbackClusterBody(BaseModel):
    cluster_id: int
    accepted: list[str] = []
    rejected: list[str] = []
    intent: str | None = None


class FeedbackBody(BaseModel):
    clusters: list[FeedbackClusterBody] = []
    merges: list[list[int]] = []
    request_id: str | None = None


class SessionBody(BaseModel):
    corpus_id: str
    config: dict = {}
    request_id: str | None = None


class RequestIdBody(BaseModel):
    request_id: str | None = None


def _summary(live: LiveSession) -> dict:
    s = live.session
    done, reason = should_terminate(s)
    counts: dict[str, int] = {}
    for intent in s.labeled.values():
        counts[intent] = counts.get(intent, 0) + 1
    return {
        "session_id": live.handle.session_id,
        "corpus_id": live.corpus_id,
        "created_at": live.handle.created_at,
        "corpus_fingerprint": live.handle.corpus_fingerprint,
        "status": s.status,
        "iteration": s.iteration,
        "k": s.k_t,
        "counts": {
            "labeled": len(s.labeled),
            "unlabeled": len(s.unlabeled_ids),
            "total": s.corpus.n,
        },
        "labeled_fraction": s.labeled_fraction,
        "intents": [{"name": name, "count": counts.get(name, 0)} for name in s.intents],
        "termination": {"done": done, "reason": reason},
    }


def create_app(store_path: str | Path) -> FastAPI:
    store = SessionStore(store_path)
    app = FastAPI(title="intent discovery service")
    app.state.store = store

    def _live(session_id: str) -> LiveSession:
        try:
            return store.get_session(session_id)
        except KeyError:
            raise HTTPException(404, f"unknown session {session_id!r}")

    @app.post("/corpora")
    async def post_corpus(dataset: UploadFile, embeddings: UploadFile):
        try:
            corpus_id, corpus = store.register_corpus(
                await dataset.read(), await embeddings.read()
            )
        except CorpusError as e:
            raise HTTPException(422, str(e))
        return JSONResponse(
            {"corpus_id": corpus_id, "n": corpus.n, "dim": corpus.dim}, status_code=201
        )

    @app.post("/sessions")
    def post_session(body: SessionBody):
        if body.request_id:
            for live in list(store._sessions.values()):
                if body.request_id in live.applied_request_ids:
                    return JSONResponse(_summary(live), status_code=200)
        try:
            config = DiscoveryConfig.from_dict(body.config)
        except (TypeError, ValueError) as e:
            raise HTTPException(422, f"invalid config: {e}")
        try:
            live = store.create_session(body.corpus_id, config, body.request_id)
        except KeyError:
            raise HTTPException(404, f"unknown corpus {body.corpus_id!r}")
        if body.request_id:
            live.applied_request_ids[body.request_id] = None
        return JSONResponse(
            {
                "session_id": live.handle.session_id,
                "created_at": live.handle.created_at,
                "corpus_fingerprint": live.handle.corpus_fingerprint,
            },
            status_code=201,
        )

    @app.get("/sessions")
    def get_sessions():
        return {"sessions": store.list_sessions()}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return _summary(_live(session_id))

    @app.get("/sessions/{session_id}/proposals")
    def get_proposals(session_id: str):
        live = _live(session_id)
        if not live.lock.acquire(blocking=False):
            raise HTTPException(409, "a mutation is in flight; retry shortly")
        try:
            proposals = propose_clusters(live.session)
        finally:
            live.lock.release()
        gamma = (
            live.session.config.gamma_first
            if live.session.iteration == 1
            else live.session.config.gamma_rest
        )
        return {
            "iteration": live.session.iteration,
            "k": live.session.k_t,
            "gamma": gamma,
            "proposals": [p.to_json_obj() for p in proposals],
        }

    @app.post("/sessions/{session_id}/feedback")
    def post_feedback(session_id: str, body: FeedbackBody):
        live = _live(session_id)
        if body.request_id and body.request_id in live.applied_request_ids:
            return {"applied": False, "duplicate": True}
        if not live.lock.acquire(blocking=False):
            raise HTTPException(409, "another mutation is in flight")
        try:
            feedback = Feedback.from_json_obj(body.model_dump())
            try:
                apply_feedback(live.session, feedback)
            except UnknownClusterError as e:
                raise HTTPException(404, str(e))
            except FeedbackValidationError as e:
                return JSONResponse({"violations": e.violations}, status_code=422)
            if body.request_id:
                live.applied_request_ids[body.request_id] = None
            store._append_event(
                live,
                "feedback_applied",
                {"feedback": feedback.to_json_obj(), "request_id": body.request_id},
            )
        finally:
            live.lock.release()
        return {
            "applied": True,
            "labeled": len(live.session.labeled),
            "intents": list(live.session.intents),
        }

    @app.post("/sessions/{session_id}/iterate", status_code=202)
    def post_iterate(session_id: str, body: RequestIdBody):
        live = _live(session_id)
        if body.request_id and body.request_id in live.applied_request_ids:
            return {
                "job_id": live.applied_request_ids[body.request_id],
                "duplicate": True,
            }
        if not live.session.feedback_this_iteration:
            return JSONResponse(
                {"violations": [{"code": "no_feedback_this_iteration"}]},
                status_code=422,
            )
        if not live.lock.acquire(blocking=False):
            raise HTTPException(409, "another mutation is in flight")
        job_id = store.create_job()
        if body.request_id:
            live.applied_request_ids[body.request_id] = job_id

        def run():
            store.update_job(job_id, status="running")
            try:
                advance_iteration(live.session)
                store._append_event(
                    live, "iteration_advanced", {"request_id": body.request_id}
                )
                record = live.session.history[-1]
                store.update_job(
                    job_id,
                    status="done",
                    iteration=live.session.iteration,
                    record=record.to_json_obj(),
                    stage_reports=[r.to_json_obj() for r in record.stage_reports],
                )
            except Exception as e:  # surface training failures to the poller
                log.exception("iteration job %s failed", job_id)
                store.update_job(job_id, status="error", error=str(e))
            finally:
                live.lock.release()

        threading.Thread(target=run, daemon=True).start()
        return {"job_id": job_id}

    @app.post("/sessions/{session_id}/finalize")
    def post_finalize(session_id: str, body: RequestIdBody):
        live = _live(session_id)
        if body.request_id and body.request_id in live.applied_request_ids:
            return {"applied": False, "duplicate": True}
        if not live.lock.acquire(blocking=False):
            raise HTTPException(409, "another mutation is in flight")
        try:
            live.session.finalized = True
            live.session.status = STATUS_CONVERGED
            if body.request_id:
                live.applied_request_ids[body.request_id] = None
            store._append_event(live, "finalized", {"request_id": body.request_id})
        finally:
            live.lock.release()
        return {"applied": True, "status": live.session.status}

    @app.get("/sessions/{session_id}/history")
    def get_history(session_id: str):
        live = _live(session_id)
        return {"history": [rec.to_json_obj() for rec in live.session.history]}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        try:
            return store.get_job(job_id)
        except KeyError:
            raise HTTPException(404, f"unknown job {job_id!r}")

    ui_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if ui_dir.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def default_store_path() -> Path:
    return Path(os.environ.get("CDI_STORE", Path.home() / ".cdi-store"))
