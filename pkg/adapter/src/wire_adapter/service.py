"""HTTP service speaking the shared wire protocol.

POST /caption /ground /similarity /embed /segment accept request
envelopes and answer response envelopes, both validated against the
shared schema file.  Status codes: 200 success, 400 schema violation or
unusable payload (error body names the offending field), 503 backends
not loaded, 500 inference failure (error body echoes the request_id).
The service holds no per-request state: identical requests always get
identical responses.
"""

import json
import logging
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .assets import KINDS, SCHEMA_VERSION, deepest_violation, load_schemas, validator
from .backends import PayloadError, ReferenceBackends

log = logging.getLogger("wire_adapter")


def _error_body(request_id: str | None, message: str, field: str | None = None) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "request_id": request_id,
        "error": {"message": message, "field": field},
    }


def _request_id_of(envelope) -> str | None:
    if isinstance(envelope, dict):
        request_id = envelope.get("request_id")
        if isinstance(request_id, str):
            return request_id
    return None


def create_app(
    assets_dir: Path | str | None = None,
    backends: ReferenceBackends | None = None,
    loaded: bool = True,
) -> FastAPI:
    """Build the service; ``loaded=False`` simulates absent model weights."""
    load_schemas(assets_dir)  # fail fast if the contract files are unusable
    backends = backends if backends is not None else ReferenceBackends()
    app = FastAPI(title="wire-adapter", version="0.1.0")

    def make_handler(kind: str):
        async def handle(request: Request) -> JSONResponse:
            raw = await request.body()
            try:
                envelope = json.loads(raw)
            except ValueError:
                return JSONResponse(
                    _error_body(None, "request body is not valid JSON"), status_code=400
                )
            request_id = _request_id_of(envelope)
            if not loaded:
                return JSONResponse(
                    _error_body(request_id, "model backends are not loaded"),
                    status_code=503,
                )
            violation = deepest_violation(validator("request", kind, assets_dir), envelope)
            if violation is not None:
                field, message = violation
                return JSONResponse(
                    _error_body(request_id, f"invalid {kind} request: {message}", field),
                    status_code=400,
                )
            try:
                payload = backends.handle(kind, envelope["payload"])
            except PayloadError as exc:
                return JSONResponse(
                    _error_body(request_id, str(exc), exc.field), status_code=400
                )
            except Exception as exc:  # inference failure
                log.exception("%s backend failed for request %s", kind, request_id)
                return JSONResponse(
                    _error_body(request_id, f"inference failure: {exc}"), status_code=500
                )
            response = {
                "schema": SCHEMA_VERSION,
                "request_id": envelope["request_id"],
                "kind": kind,
                "payload": payload,
                "model_info": backends.model_info,
            }
            violation = deepest_violation(validator("response", kind, assets_dir), response)
            if violation is not None:
                field, message = violation
                log.error("own %s response violates the schema at %s: %s", kind, field, message)
                return JSONResponse(
                    _error_body(request_id, f"server produced an invalid response at {field}"),
                    status_code=500,
                )
            return JSONResponse(response)

        return handle

    for kind in KINDS:
        app.post(f"/{kind}")(make_handler(kind))

    @app.get("/healthz")
    async def healthz() -> dict:
        return {"status": "ok" if loaded else "loading", "schema": SCHEMA_VERSION}

    return app
