"""HTTP facade for human-in-the-loop annotation and verification.

Sessions wrap the active-learning engine: the server hands out query batches,
ingests labels (write-ahead journaled, so accepted labels survive a crash),
retrains between batches, and exposes the accuracy trace. Driving a session
from a scripted client that answers from ground truth reproduces the
in-process loop bit for bit under the same seed.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, UploadFile
from fastapi.responses import JSONResponse, PlainTextResponse, Response

from . import active, classify, pipeline
from .dataio import FacePair, ImageStore, load_manifest_pairs
from .errors import DataError, ModelIOError, ToolkitError
from .preprocess import decode_image_bytes

POOL_FRACTION = 0.9  # leading share of manifest pairs forms the unlabeled pool

LABEL_VALUES = {"match": 1, "mismatch": 0, 1: 1, 0: 0, "1": 1, "0": 0}


def pair_id(pair: FacePair) -> str:
    """Stable id of an image pair: sha1 over paths and 0/1 flip flags.

    The key format is part of the wire contract (clients may precompute ids
    from a manifest), so it uses plain 0/1 flags, nothing language-specific.
    """
    key = (
        f"{pair.image_a.path}|{int(pair.image_a.flipped)}"
        f"|{pair.image_b.path}|{int(pair.image_b.flipped)}"
    )
    return hashlib.sha1(key.encode("utf-8")).hexdigest()[:16]


def problem(status: int, title: str, detail: str) -> JSONResponse:
    return JSONResponse(
        {"type": "about:blank", "title": title, "status": status, "detail": detail},
        status_code=status,
        media_type="application/problem+json",
    )


@dataclass
class SessionRuntime:
    sid: str
    manifest: Path
    engine: active.ActiveLearner
    pool_pairs: list[FacePair]
    ground_truth: np.ndarray
    processed_requests: set[str]
    auto_seeded: bool
    lock: threading.Lock


class SessionBackend:
    """Session persistence, feature cache, and the label journal."""

    def __init__(self, session_store: str | Path, image_cache: int = 512):
        self.root = Path(session_store)
        self.root.mkdir(parents=True, exist_ok=True)
        self.store = ImageStore(capacity=image_cache)
        self.sessions: dict[str, SessionRuntime] = {}
        self.pair_registry: dict[str, FacePair] = {}
        self._global_lock = threading.Lock()
        self._settings = pipeline.TrainSettings()

    # -- feature cache -------------------------------------------------------

    def _split_pairs(self, manifest: Path) -> tuple[list[FacePair], list[FacePair]]:
        pairs = load_manifest_pairs(manifest)
        n_pool = max(2, int(len(pairs) * POOL_FRACTION))
        if n_pool >= len(pairs):
            raise DataError("manifest has too few pairs to hold out a test split")
        return pairs[:n_pool], pairs[n_pool:]

    def _features(self, manifest: Path):
        digest = hashlib.sha1(manifest.read_bytes()).hexdigest()[:16]
        cache_file = self.root / f"features-{digest}.npz"
        pool_pairs, test_pairs = self._split_pairs(manifest)
        if cache_file.exists():
            with np.load(cache_file) as z:
                if z["x_pool"].shape[0] == len(pool_pairs):
                    return pool_pairs, z["x_pool"], z["y_pool"], z["x_test"], z["y_test"]
        featurizer, fitted = pipeline.fit_featurizer(pool_pairs, self.store, self._settings)
        x_pool = np.hstack([fitted["y"], fitted["crcb"]])
        x_test = featurizer.features(test_pairs, self.store)
        y_pool = np.array([p.label for p in pool_pairs], dtype=int)
        y_test = np.array([p.label for p in test_pairs], dtype=int)
        np.savez(cache_file, x_pool=x_pool, y_pool=y_pool, x_test=x_test, y_test=y_test)
        return pool_pairs, x_pool, y_pool, x_test, y_test

    # -- session lifecycle ---------------------------------------------------

    def _register_pairs(self, runtime: SessionRuntime) -> None:
        for pair in runtime.pool_pairs:
            self.pair_registry[pair_id(pair)] = pair

    def create_session(self, manifest: Path, config: active.ActiveConfig, auto_seed: bool) -> SessionRuntime:
        pool_pairs, x_pool, y_pool, x_test, y_test = self._features(manifest)
        if len({pair_id(p) for p in pool_pairs}) != len(pool_pairs):
            raise DataError("dataset manifest contains duplicate pairs; pair ids must be unique")
        engine = active.ActiveLearner(x_pool, x_test, y_test, config)
        sid = uuid.uuid4().hex[:12]
        runtime = SessionRuntime(
            sid=sid,
            manifest=manifest,
            engine=engine,
            pool_pairs=pool_pairs,
            ground_truth=y_pool,
            processed_requests=set(),
            auto_seeded=auto_seed,
            lock=threading.Lock(),
        )
        if auto_seed:  # seed labels come from recorded ground truth
            engine.provide_labels({i: int(y_pool[i]) for i in engine.pending_queries()})
        self._register_pairs(runtime)
        self.sessions[sid] = runtime
        self._persist(runtime)
        return runtime

    def _state_path(self, sid: str) -> Path:
        return self.root / f"{sid}.state.json"

    def _journal_path(self, sid: str) -> Path:
        return self.root / f"{sid}.labels.jsonl"

    def _persist(self, runtime: SessionRuntime) -> None:
        payload = {
            "sid": runtime.sid,
            "manifest": str(runtime.manifest),
            "auto_seeded": runtime.auto_seeded,
            "processed_requests": sorted(runtime.processed_requests),
            "engine": runtime.engine.to_state(),
        }
        tmp = self._state_path(runtime.sid).with_suffix(".tmp")
        tmp.write_text(json.dumps(payload), encoding="utf-8")
        os.replace(tmp, self._state_path(runtime.sid))

    def journal_labels(self, runtime: SessionRuntime, request_id: str, labels: dict[str, int]) -> None:
        """Write-ahead record of a label post; fsynced before it is applied."""
        line = json.dumps({"request_id": request_id, "labels": labels})
        with open(self._journal_path(runtime.sid), "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def get_session(self, sid: str) -> SessionRuntime | None:
        runtime = self.sessions.get(sid)
        if runtime is not None:
            return runtime
        return self._recover(sid)

    def _recover(self, sid: str) -> SessionRuntime | None:
        state_path = self._state_path(sid)
        if not state_path.exists():
            return None
        payload = json.loads(state_path.read_text(encoding="utf-8"))
        manifest = Path(payload["manifest"])
        pool_pairs, x_pool, y_pool, x_test, y_test = self._features(manifest)
        engine = active.ActiveLearner.from_state(payload["engine"], x_pool, x_test, y_test)
        runtime = SessionRuntime(
            sid=sid,
            manifest=manifest,
            engine=engine,
            pool_pairs=pool_pairs,
            ground_truth=y_pool,
            processed_requests=set(payload["processed_requests"]),
            auto_seeded=payload["auto_seeded"],
            lock=threading.Lock(),
        )
        self._replay_journal(runtime)
        self._register_pairs(runtime)
        self.sessions[sid] = runtime
        return runtime

    def _replay_journal(self, runtime: SessionRuntime) -> None:
        """Re-apply journaled label posts that were accepted but not persisted."""
        journal = self._journal_path(runtime.sid)
        if not journal.exists():
            return
        index_by_pid = {pair_id(p): i for i, p in enumerate(runtime.pool_pairs)}
        for line in journal.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            rid = entry["request_id"]
            if rid in runtime.processed_requests:
                continue
            updates = {
                index_by_pid[pid]: int(lab)
                for pid, lab in entry["labels"].items()
                if pid in index_by_pid and index_by_pid[pid] in set(runtime.engine.pending)
            }
            if updates:
                runtime.engine.provide_labels(updates)
            runtime.processed_requests.add(rid)
        self._persist(runtime)


def _session_view(runtime: SessionRuntime) -> dict:
    engine = runtime.engine
    pending = []
    for idx in engine.pending_queries():
        pair = runtime.pool_pairs[idx]
        pid = pair_id(pair)
        pending.append(
            {
                "pair_id": pid,
                "image_a": f"/api/pairs/{pid}/images/a",
                "image_b": f"/api/pairs/{pid}/images/b",
            }
        )
    return {
        "session_id": runtime.sid,
        "state": engine.state,
        "round": engine.round,
        "labeled_count": len(engine.labels),
        "budget": engine.config.budget,
        "pending": pending,
    }


def create_app(
    session_store: str | Path,
    data_root: str | Path | None = None,
    model_path: str | Path | None = None,
    token: str | None = None,
) -> FastAPI:
    """Build the annotation/verification application.

    ``model_path`` points at a trained verification container and enables the
    /api/verify endpoint. ``token``, when set, requires ``Authorization:
    Bearer <token>`` on every /api route.
    """
    app = FastAPI(title="sslface annotation service")
    from fastapi.middleware.cors import CORSMiddleware

    # the annotator UI is served statically from another origin
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    backend = SessionBackend(session_store)
    app.state.backend = backend
    app.state.data_root = Path(data_root) if data_root else None
    app.state.idempotency_path = backend.root / "idempotency.json"
    app.state.idempotency = (
        json.loads(app.state.idempotency_path.read_text(encoding="utf-8"))
        if app.state.idempotency_path.exists()
        else {}
    )

    verification_model = None
    if model_path is not None:
        verification_model = classify.load_verification_model(model_path)
    app.state.verification_model = verification_model

    @app.middleware("http")
    async def check_token(request: Request, call_next):
        if token and request.url.path.startswith("/api"):
            header = request.headers.get("authorization", "")
            if header != f"Bearer {token}":
                return problem(401, "unauthorized", "missing or invalid bearer token")
        return await call_next(request)

    @app.exception_handler(ToolkitError)
    async def toolkit_error(_req: Request, exc: ToolkitError):
        return problem(400, type(exc).__name__, str(exc))

    @app.post("/api/sessions", status_code=201)
    async def create_session(request: Request):
        body = await request.json()
        key = body.get("idempotency_key")
        if key and key in app.state.idempotency:
            sid = app.state.idempotency[key]
            runtime = backend.get_session(sid)
            if runtime is not None:
                return JSONResponse(_session_view(runtime), status_code=200)
        dataset = body.get("dataset")
        if not dataset:
            return problem(400, "bad config", "missing 'dataset' (path to a dataset manifest)")
        manifest = Path(dataset)
        if not manifest.is_absolute() and app.state.data_root is not None:
            manifest = app.state.data_root / manifest
        if not manifest.exists():
            return problem(400, "bad config", f"dataset manifest not found: {manifest}")
        try:
            config = active.ActiveConfig(
                strategy=body.get("strategy", active.ENTROPY),
                budget=int(body["budget"]),
                batch_size=int(body.get("batch_size", 100)),
                seed=int(body.get("seed", 0)),
                seed_fraction=float(body.get("seed_fraction", 0.05)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            return problem(400, "bad config", f"invalid session config: {exc}")
        try:
            runtime = backend.create_session(manifest, config, bool(body.get("auto_seed", True)))
        except DataError as exc:
            return problem(400, "bad config", str(exc))
        if key:
            app.state.idempotency[key] = runtime.sid
            app.state.idempotency_path.write_text(json.dumps(app.state.idempotency), encoding="utf-8")
        return _session_view(runtime)

    @app.get("/api/sessions/{sid}/queries")
    async def get_queries(sid: str):
        runtime = backend.get_session(sid)
        if runtime is None:
            return problem(404, "not found", f"no session {sid}")
        return _session_view(runtime)

    @app.post("/api/sessions/{sid}/labels")
    async def post_labels(sid: str, request: Request):
        runtime = backend.get_session(sid)
        if runtime is None:
            return problem(404, "not found", f"no session {sid}")
        body = await request.json()
        request_id = body.get("request_id") or uuid.uuid4().hex
        entries = body.get("labels", [])
        with runtime.lock:
            if request_id in runtime.processed_requests:
                view = _session_view(runtime)
                view["replayed"] = True
                return view
            if runtime.engine.state == active.DONE:
                return problem(410, "gone", "session already reached its label budget")
            index_by_pid = {pair_id(p): i for i, p in enumerate(runtime.pool_pairs)}
            updates: dict[int, int] = {}
            for entry in entries:
                pid = entry.get("pair_id")
                raw = entry.get("label")
                if pid not in index_by_pid:
                    return problem(409, "conflict", f"unknown pair id {pid!r}")
                if raw not in LABEL_VALUES:
                    return problem(400, "bad label", f"label must be match/mismatch/0/1, got {raw!r}")
                idx = index_by_pid[pid]
                if idx in runtime.engine.labels:
                    return problem(409, "conflict", f"pair {pid} is already labeled")
                if idx not in runtime.engine.pending:
                    return problem(409, "conflict", f"pair {pid} is not part of the pending batch")
                updates[idx] = LABEL_VALUES[raw]
            backend.journal_labels(
                runtime, request_id, {pair_id(runtime.pool_pairs[i]): lab for i, lab in updates.items()}
            )
            runtime.engine.provide_labels(updates)  # may retrain + advance
            runtime.processed_requests.add(request_id)
            backend._persist(runtime)
            return _session_view(runtime)

    @app.get("/api/sessions/{sid}/metrics")
    async def get_metrics(sid: str, request: Request, format: str = "json"):
        runtime = backend.get_session(sid)
        if runtime is None:
            return problem(404, "not found", f"no session {sid}")
        trace = runtime.engine.trace
        wants_csv = format == "csv" or "text/csv" in request.headers.get("accept", "")
        if wants_csv:
            return PlainTextResponse(active.trace_to_csv(trace), media_type="text/csv")
        return {
            "session_id": sid,
            "state": runtime.engine.state,
            "labeled_count": len(runtime.engine.labels),
            "budget": runtime.engine.config.budget,
            "trace": [{"round": r, "labeled_count": c, "test_accuracy": a} for r, c, a in trace],
        }

    @app.get("/api/pairs/{pid}/images/{side}")
    async def get_pair_image(pid: str, side: str):
        if side not in ("a", "b"):
            return problem(404, "not found", "image side must be 'a' or 'b'")
        pair = backend.pair_registry.get(pid)
        if pair is None:
            return problem(404, "not found", f"unknown pair id {pid!r}")
        ref = pair.image_a if side == "a" else pair.image_b
        img = backend.store.get(ref)
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(img).save(buf, format="PNG")
        return Response(buf.getvalue(), media_type="image/png")

    @app.post("/api/verify")
    async def verify_pair(a: UploadFile, b: UploadFile):
        if app.state.verification_model is None:
            return problem(503, "unavailable", "server started without a verification model")
        img_a = decode_image_bytes(await a.read())
        img_b = decode_image_bytes(await b.read())
        prob, match = classify.verify(app.state.verification_model, img_a, img_b)
        return {"probability": prob, "match": match}

    return app


def run_server(
    host: str,
    port: int,
    session_store: str | Path,
    data_root: str | Path | None = None,
    model_path: str | Path | None = None,
    token: str | None = None,
) -> None:
    import uvicorn

    app = create_app(session_store, data_root=data_root, model_path=model_path, token=token)
    uvicorn.run(app, host=host, port=port, log_level="warning")
