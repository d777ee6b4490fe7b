"""HTTP facade for interactive prompting: session-scoped example sets,
prediction with a chosen ensemble strategy, and model listing.

REST surface:
    POST   /sessions                         -> {"id": ...}
    GET    /sessions/{id}/examples
    POST   /sessions/{id}/examples           multipart source+mask+palette
    DELETE /sessions/{id}/examples/{eid}
    POST   /sessions/{id}/predict            multipart query + form fields
    GET    /models
    GET    /healthz
Errors are JSON {"code": ..., "message": ...}.
"""

from __future__ import annotations

import base64
import json
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Form, HTTPException, Request, UploadFile
from fastapi.responses import JSONResponse
from PIL import Image

from . import pngio
from .inference import STRATEGIES, EnsembleSpec, predict_pixels
from .model import GeometryMismatch, SegViT
from .palette import KINDS, Palette, SegmentMap, decode, recolor

MAX_EXAMPLES = 16
SESSION_TTL_SECONDS = 3600
THUMBNAIL_SIDE = 64


@dataclass
class Example:
    eid: str
    source: np.ndarray
    mask: SegmentMap
    target: np.ndarray  # recolored mask, cached for canvas assembly


@dataclass
class Session:
    sid: str
    model_id: str
    created_at: float
    examples: list[Example] = field(default_factory=list)
    palette: Palette | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


def _error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail={"code": code, "message": message})


def _thumbnail_b64(image: np.ndarray) -> str:
    im = Image.fromarray(image)
    im.thumbnail((THUMBNAIL_SIDE, THUMBNAIL_SIDE))
    return base64.b64encode(pngio.image_bytes(np.asarray(im))).decode()


class SessionStore:
    """In-memory sessions with TTL; optional directory-backed persistence."""

    def __init__(self, ttl: float = SESSION_TTL_SECONDS, persist_dir: str | Path | None = None):
        self.ttl = ttl
        self.persist_dir = Path(persist_dir) if persist_dir else None
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        if self.persist_dir:
            self.persist_dir.mkdir(parents=True, exist_ok=True)
            self._load_persisted()

    def create(self, model_id: str) -> Session:
        session = Session(sid=uuid.uuid4().hex, model_id=model_id, created_at=time.time())
        with self._lock:
            self._sessions[session.sid] = session
        return session

    def get(self, sid: str) -> Session:
        self._evict_expired()
        with self._lock:
            session = self._sessions.get(sid)
        if session is None:
            raise _error(404, "unknown_session", f"no session {sid}")
        return session

    def _evict_expired(self) -> None:
        now = time.time()
        with self._lock:
            dead = [s for s, v in self._sessions.items() if now - v.created_at > self.ttl]
            for sid in dead:
                del self._sessions[sid]

    def persist(self, session: Session) -> None:
        if not self.persist_dir:
            return
        base = self.persist_dir / session.sid
        base.mkdir(exist_ok=True)
        meta = {
            "sid": session.sid,
            "model_id": session.model_id,
            "created_at": session.created_at,
            "palette": json.loads(session.palette.to_json()) if session.palette else None,
            "examples": [e.eid for e in session.examples],
        }
        for e in session.examples:
            pngio.save_image(base / f"{e.eid}_source.png", e.source)
            pngio.save_map(base / f"{e.eid}_mask.png", e.mask)
        (base / "session.json").write_text(json.dumps(meta))

    def _load_persisted(self) -> None:
        for meta_path in self.persist_dir.glob("*/session.json"):
            meta = json.loads(meta_path.read_text())
            palette = Palette.from_json(json.dumps(meta["palette"])) if meta["palette"] else None
            session = Session(
                sid=meta["sid"], model_id=meta["model_id"], created_at=meta["created_at"], palette=palette
            )
            base = meta_path.parent
            for eid in meta["examples"]:
                source = pngio.load_image(base / f"{eid}_source.png")
                mask = pngio.load_map(base / f"{eid}_mask.png")
                session.examples.append(
                    Example(eid=eid, source=source, mask=mask, target=recolor(mask, palette))
                )
            self._sessions[session.sid] = session


def _example_payload(example: Example) -> dict:
    return {
        "id": example.eid,
        "width": int(example.source.shape[1]),
        "height": int(example.source.shape[0]),
        "thumbnail_png": _thumbnail_b64(example.source),
    }


def create_app(
    models: dict[str, SegViT],
    *,
    session_ttl: float = SESSION_TTL_SECONDS,
    persist_dir: str | Path | None = None,
) -> FastAPI:
    if not models:
        raise ValueError("at least one model is required")
    app = FastAPI(title="icseg")
    store = SessionStore(ttl=session_ttl, persist_dir=persist_dir)
    default_model = next(iter(models))

    @app.exception_handler(HTTPException)
    async def _handler(request: Request, exc: HTTPException):
        detail = exc.detail
        if not isinstance(detail, dict):
            detail = {"code": "error", "message": str(detail)}
        return JSONResponse(status_code=exc.status_code, content=detail)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/models")
    def list_models():
        return {
            "models": [
                {"id": mid, "config": asdict(m.cfg)} for mid, m in models.items()
            ]
        }

    @app.post("/sessions")
    async def create_session(request: Request):
        body = {}
        if int(request.headers.get("content-length") or 0) > 0:
            try:
                body = await request.json()
            except Exception:
                raise _error(422, "bad_body", "body must be JSON")
        model_id = body.get("model_id", default_model)
        if model_id not in models:
            raise _error(404, "unknown_model", f"no model {model_id}")
        session = store.create(model_id)
        store.persist(session)
        return {"id": session.sid}

    @app.get("/sessions/{sid}/examples")
    def list_examples(sid: str):
        session = store.get(sid)
        with session.lock:
            return {"examples": [_example_payload(e) for e in session.examples]}

    @app.post("/sessions/{sid}/examples")
    async def add_example(
        sid: str,
        source: UploadFile,
        mask: UploadFile,
        palette: str = Form(...),
    ):
        session = store.get(sid)
        try:
            pal = Palette.from_json(palette)
        except Exception as exc:
            raise _error(422, "bad_palette", f"palette JSON invalid: {exc}")
        src = pngio.image_from_bytes(await source.read())
        try:
            seg = pngio.map_from_bytes(await mask.read())
        except ValueError as exc:
            raise _error(422, "bad_mask", str(exc))
        if src.shape[:2] != seg.ids.shape:
            raise _error(422, "geometry_mismatch", "source and mask sizes differ")
        missing = seg.id_set() - set(pal.entries)
        if missing:
            raise _error(422, "bad_palette", f"mask ids without palette entries: {sorted(missing)}")
        with session.lock:
            if len(session.examples) >= MAX_EXAMPLES:
                raise _error(413, "example_cap", f"sessions hold at most {MAX_EXAMPLES} examples")
            if session.examples and session.examples[0].source.shape != src.shape:
                raise _error(422, "geometry_mismatch", "examples must share one geometry")
            if session.palette is not None and pal != session.palette:
                raise _error(422, "palette_mismatch", "all session examples must share one palette")
            example = Example(eid=uuid.uuid4().hex[:12], source=src, mask=seg, target=recolor(seg, pal))
            session.palette = pal
            session.examples.append(example)
            payload = [_example_payload(e) for e in session.examples]
        store.persist(session)
        return {"examples": payload}

    @app.delete("/sessions/{sid}/examples/{eid}")
    def delete_example(sid: str, eid: str):
        session = store.get(sid)
        with session.lock:
            keep = [e for e in session.examples if e.eid != eid]
            if len(keep) == len(session.examples):
                raise _error(404, "unknown_example", f"no example {eid}")
            session.examples[:] = keep
            payload = [_example_payload(e) for e in session.examples]
        store.persist(session)
        return {"examples": payload}

    @app.post("/sessions/{sid}/predict")
    async def handle_predict(
        sid: str,
        query: UploadFile,
        strategy: str = Form("single"),
        grid_n: int = Form(0),
        task_kind: str = Form("category"),
    ):
        session = store.get(sid)
        if strategy not in STRATEGIES:
            raise _error(422, "bad_strategy", f"strategy must be one of {STRATEGIES}")
        if task_kind not in KINDS:
            raise _error(422, "bad_task_kind", f"task_kind must be one of {KINDS}")
        t_start = time.perf_counter()
        q = pngio.image_from_bytes(await query.read())
        with session.lock:
            if not session.examples:
                raise _error(409, "empty_examples", "session has no examples")
            examples = [(e.source, e.target) for e in session.examples]
            pal = session.palette
        if strategy == "single":
            examples = examples[:1]
        if strategy == "spatial" and grid_n < 1:
            grid_n = int(np.ceil(np.sqrt(len(examples))))
        model = models[session.model_id]
        t_decode = time.perf_counter()
        try:
            spec = EnsembleSpec(strategy=strategy, examples=examples, grid_n=grid_n)
            pixels = predict_pixels(model, spec, q, task_kind)
        except GeometryMismatch as exc:
            raise _error(422, "geometry_mismatch", str(exc))
        t_forward = time.perf_counter()
        prediction = (pixels * 255.0).round().astype(np.uint8)
        segmap = decode(prediction, pal, kind=task_kind)
        t_done = time.perf_counter()
        return {
            "prediction_png": base64.b64encode(pngio.image_bytes(prediction)).decode(),
            "mask_png": base64.b64encode(pngio.map_bytes(segmap)).decode(),
            "palette": json.loads(pal.to_json()),
            "timings_ms": {
                "decode_input": (t_decode - t_start) * 1000.0,
                "forward": (t_forward - t_decode) * 1000.0,
                "decode_output": (t_done - t_forward) * 1000.0,
                "total": (t_done - t_start) * 1000.0,
            },
        }

    return app
