"""HTTP service mirroring the engine operations one-to-one."""

from __future__ import annotations

import logging
import threading
from collections.abc import Callable
from typing import Any

from fastapi import Body, FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .backend import BackendError
from .corpus import Corpus, Query, ValidationError
from .engine import UsageError
from .runtime import Runtime

logger = logging.getLogger(__name__)


class ServiceError(Exception):
    def __init__(self, status: int, detail: str):
        super().__init__(detail)
        self.status = status
        self.detail = detail


class _Gate:
    """Retrievals share the gate; warm-up and corpus reload take it exclusively.

    Requests arriving while an exclusive holder is active get 503 instead of
    waiting.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._readers = 0
        self.exclusive: str | None = None

    def enter(self) -> None:
        with self._lock:
            if self.exclusive:
                raise ServiceError(503, f"service busy: {self.exclusive} in progress")
            self._readers += 1

    def leave(self) -> None:
        with self._lock:
            self._readers -= 1

    def begin(self, what: str) -> None:
        with self._lock:
            if self.exclusive or self._readers:
                raise ServiceError(503, f"cannot start {what}: service busy")
            self.exclusive = what

    def end(self) -> None:
        with self._lock:
            self.exclusive = None


def _parse_query(body: Any, corpus: Corpus) -> Query:
    if not isinstance(body, dict) or "query" not in body:
        raise ServiceError(400, "body must be a JSON object with a 'query' field")
    try:
        q = Query.from_dict(body["query"])
    except ValidationError as exc:
        raise ServiceError(400, str(exc)) from None
    unknown = corpus.unresolved(q.gold_doc_ids)
    if unknown:
        raise ServiceError(422, f"unknown gold document id(s): {unknown}")
    return q


def create_app(runtime: Runtime, reload_corpus: Callable[[], Corpus] | None = None) -> FastAPI:
    app = FastAPI(title="rahore", version="0.1.0")
    gate = _Gate()

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return JSONResponse({"detail": exc.detail}, status_code=exc.status)

    @app.exception_handler(RequestValidationError)
    async def _malformed(request: Request, exc: RequestValidationError):
        return JSONResponse({"detail": "malformed request body", "errors": exc.errors()}, status_code=400)

    def guarded(fn: Callable[[], Any]) -> Any:
        gate.enter()
        try:
            return fn()
        except BackendError as exc:
            logger.error("backend failure: %s", exc)
            raise ServiceError(502, f"backend failure: {exc}") from None
        finally:
            gate.leave()

    @app.get("/healthz")
    def healthz():
        status = runtime.backend.health()
        code = 200 if status.get("status") == "ok" else 503
        return JSONResponse({"status": "ok" if code == 200 else "degraded", "backend": status}, status_code=code)

    @app.get("/corpus")
    def corpus():
        return [{"id": d.id, "text": d.text} for d in runtime.corpus]

    @app.post("/retrieve")
    def retrieve(body: Any = Body(None)):
        q = _parse_query(body, runtime.corpus)
        k = body.get("k", runtime.config.default_k)
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            raise ServiceError(400, "'k' must be a positive integer")
        result = guarded(lambda: runtime.engine.retrieve(q, runtime.corpus, k))
        return result.to_dict(top_only=True)

    @app.post("/score")
    def score(body: Any = Body(None)):
        q = _parse_query(body, runtime.corpus)
        doc_id = body.get("doc_id")
        if not isinstance(doc_id, str):
            raise ServiceError(400, "'doc_id' must be a string")
        if doc_id not in runtime.corpus:
            raise ServiceError(422, f"unknown document id {doc_id!r}")
        s = guarded(lambda: runtime.engine.score(q, runtime.corpus.get(doc_id)))
        return {"query_id": q.id, "doc_id": doc_id, **s.to_dict()}

    @app.post("/warm")
    def warm():
        gate.begin("warm-up")
        try:
            ledger = runtime.engine.warm_cache(runtime.corpus)
        except UsageError as exc:
            raise ServiceError(409, str(exc)) from None
        except BackendError as exc:
            raise ServiceError(502, f"backend failure during warm-up: {exc}") from None
        finally:
            gate.end()
        return ledger.summary()

    @app.post("/reload")
    def reload():
        if reload_corpus is None:
            raise ServiceError(404, "corpus reload not configured")
        gate.begin("corpus reload")
        try:
            runtime.corpus = reload_corpus()
        except (OSError, ValidationError) as exc:
            raise ServiceError(422, f"reload failed: {exc}") from None
        finally:
            gate.end()
        return {"documents": len(runtime.corpus)}

    app.state.startup_health = runtime.backend.health()
    app.state.gate = gate
    app.state.runtime = runtime
    return app
