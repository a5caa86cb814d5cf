"""HTTP service: session-based interactive dialog over the inference
pipeline.

Sessions cache the image-derived context (aligned tokens + structured
findings are computed once per session via the pipeline cache) and persist
to an embedded sqlite store so the service can restart without losing
dialogs. Turn handling is serialized per session; different sessions are
served concurrently.
"""

from __future__ import annotations

import io
import json
import re
import sqlite3
import threading
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .corpus import load_corpus
from .pipeline import ImageStudy, InferencePipeline
from .prompts import Turn
from .trainutil import config_hash
from .vocab import Status

CORRECTION_HINT = re.compile(r"\b(correct|fix|adapt the report|update the report)\b", re.I)
STREAM_CHUNK = 24


class SessionStore:
    """Sqlite-backed key-value store for session state."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        with self._conn() as conn:
            conn.execute("CREATE TABLE IF NOT EXISTS sessions (id TEXT PRIMARY KEY, data TEXT)")

    def _conn(self) -> sqlite3.Connection:
        return sqlite3.connect(self.path)

    def get(self, session_id: str) -> dict | None:
        with self._lock, self._conn() as conn:
            row = conn.execute("SELECT data FROM sessions WHERE id=?", (session_id,)).fetchone()
        return json.loads(row[0]) if row else None

    def put(self, session: dict) -> None:
        with self._lock, self._conn() as conn:
            conn.execute(
                "INSERT OR REPLACE INTO sessions (id, data) VALUES (?, ?)",
                (session["id"], json.dumps(session)),
            )

    def ids(self) -> list[str]:
        with self._lock, self._conn() as conn:
            return [r[0] for r in conn.execute("SELECT id FROM sessions")]


def _findings_statuses(pipeline: InferencePipeline, study) -> dict[str, str]:
    ctx = pipeline.image_context(study)
    positive = set(ctx.findings)
    return {
        name: (Status.POSITIVE.value if name in positive else Status.NEGATIVE.value)
        for name in pipeline.classifier.vocab.names
    }


def create_app(
    pipeline: InferencePipeline | None,
    state_dir: str | Path,
    corpus_dir: str | Path | None = None,
) -> FastAPI:
    state_dir = Path(state_dir)
    state_dir.mkdir(parents=True, exist_ok=True)
    store = SessionStore(state_dir / "sessions.sqlite")
    app = FastAPI(title="radassist")
    locks: dict[str, threading.Lock] = {}
    locks_guard = threading.Lock()
    corpus_index: dict[str, object] = {}
    if corpus_dir is not None:
        corpus_index = {s.id: s for s in load_corpus(corpus_dir)}

    digests = {"service": "radassist"}
    if pipeline is not None:
        digests = {
            "vision": config_hash(pipeline.vision.config.to_dict()),
            "classifier": config_hash(pipeline.classifier.config.to_dict()),
            "lm": config_hash(pipeline.model.lm.config.to_dict()),
        }

    def session_lock(session_id: str) -> threading.Lock:
        with locks_guard:
            return locks.setdefault(session_id, threading.Lock())

    def study_for(session: dict):
        study_id = session.get("study_id")
        if study_id and study_id in corpus_index:
            return corpus_index[study_id]
        image = np.load(state_dir / f"{session['id']}.npy")
        return ImageStudy(id=session["id"], image=image, indication_text=session.get("indication"))

    def require_pipeline() -> InferencePipeline:
        if pipeline is None:
            raise HTTPException(status_code=503, detail="models not loaded")
        return pipeline

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "models_loaded": pipeline is not None, "digests": digests}

    @app.post("/v1/sessions")
    async def create_session(request: Request):
        pipe = require_pipeline()
        study = None
        indication = None
        content_type = request.headers.get("content-type", "")
        session_id = uuid.uuid4().hex[:12]
        if content_type.startswith("multipart/"):
            form = await request.form()
            upload = form.get("image")
            if upload is None:
                raise HTTPException(status_code=400, detail="missing image field")
            indication = form.get("indication") or None
            raw = await upload.read()
            try:
                from PIL import Image

                size = pipe.vision.config.image_size
                with Image.open(io.BytesIO(raw)) as im:
                    im = im.convert("L").resize((size, size), Image.BILINEAR)
                    image = (np.asarray(im, dtype=np.float32) / 255.0).astype(np.float32)
            except Exception as exc:  # noqa: BLE001 - any decode failure is a client error
                raise HTTPException(status_code=400, detail=f"invalid image: {exc}") from exc
            np.save(state_dir / f"{session_id}.npy", image)
            study = ImageStudy(id=session_id, image=image, indication_text=indication)
        else:
            try:
                body = await request.json()
            except Exception as exc:  # noqa: BLE001
                raise HTTPException(status_code=400, detail="expected multipart image or JSON body") from exc
            study_id = body.get("study_id")
            if not study_id:
                raise HTTPException(status_code=400, detail="missing study_id")
            if study_id not in corpus_index:
                raise HTTPException(status_code=404, detail=f"unknown study {study_id!r}")
            study = corpus_index[study_id]
            indication = body.get("indication")

        report = pipe.generate_report(study, use_indication=indication is not None)
        findings = _findings_statuses(pipe, study)
        session = {
            "id": session_id,
            "study_id": getattr(study, "id", None) if not isinstance(study, ImageStudy) else None,
            "indication": indication,
            "created_at": time.time(),
            "report": report,
            "findings": findings,
            "history": [{"role": "assistant", "text": report, "ts": time.time()}],
            "digests": digests,
        }
        store.put(session)
        return {
            "session_id": session_id,
            "report": report,
            "findings": findings,
            "digests": digests,
        }

    @app.post("/v1/sessions/{session_id}/messages")
    async def post_message(session_id: str, request: Request, stream: bool = False):
        pipe = require_pipeline()
        session = store.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        try:
            body = await request.json()
        except Exception as exc:  # noqa: BLE001
            raise HTTPException(status_code=400, detail="expected a JSON body") from exc
        text = (body.get("text") or "").strip()
        if not text:
            raise HTTPException(status_code=400, detail="empty message")
        intent = body.get("intent")
        is_correction = intent == "correction" or (
            intent is None and CORRECTION_HINT.search(text) is not None
        )

        with session_lock(session_id):
            study = study_for(session)
            turns = [Turn(h["role"], h["text"]) for h in session["history"]]
            reply, truncated = pipe.dialog_turn(study, turns, text)
            now = time.time()
            session["history"].append({"role": "user", "text": text, "ts": now})
            session["history"].append({"role": "assistant", "text": reply, "ts": now})
            if is_correction:
                session["report"] = reply
            store.put(session)

        payload = {"reply": reply, "truncated": truncated, "digests": digests}
        if is_correction:
            payload["report"] = reply
        if stream:
            def chunks():
                for i in range(0, len(reply), STREAM_CHUNK):
                    yield f"data: {json.dumps(reply[i: i + STREAM_CHUNK])}\n\n"
                tail = dict(payload)
                tail.pop("reply")
                yield f"event: done\ndata: {json.dumps(tail)}\n\n"

            return StreamingResponse(chunks(), media_type="text/event-stream")
        return JSONResponse(payload)

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        session = store.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        return {
            "session_id": session_id,
            "study_id": session.get("study_id"),
            "report": session["report"],
            "findings": session["findings"],
            "history": session["history"],
            "digests": session.get("digests", digests),
        }

    return app
