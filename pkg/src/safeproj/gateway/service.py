"""HTTP moderation service.

    POST /v1/project   {"prompt": str}                -> Stage-1 projection only
    POST /v1/generate  {"prompt": str, "seed": int?}  -> full project/generate/verify cascade
    GET  /v1/health

Status codes: 400 malformed request, 422 projection found no tau-safe
prompt, 503 backend outage or timeout (body carries a machine-readable
reason). Every completed call is appended to the audit log before the
response is sent.
"""

from __future__ import annotations

import asyncio
import json
import logging
import uuid
from typing import Any

from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse

from ..cascade import CascadeDeps, projected_reference_sample
from ..errors import BackendUnavailableError, CascadeError, ProjectionUnavailableError, ProtocolError
from ..projection import local_search_project
from .audit import AuditWriter, generate_record, project_record
from .config import ServiceConfig, build_deps

logger = logging.getLogger(__name__)

MAX_PROMPT_CHARS = 8192


class BadRequest(Exception):
    pass


def _error(status: int, kind: str, reason: str, **extra: Any) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"type": kind, "reason": reason, **extra}})


async def _body(request: Request) -> dict[str, Any]:
    raw = await request.body()
    try:
        data = json.loads(raw)
    except ValueError as exc:
        raise BadRequest(f"body is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise BadRequest("body must be a JSON object")
    prompt = data.get("prompt")
    if not isinstance(prompt, str) or not prompt.strip():
        raise BadRequest("'prompt' must be a nonempty string")
    if len(prompt) > MAX_PROMPT_CHARS:
        raise BadRequest(f"'prompt' exceeds {MAX_PROMPT_CHARS} characters")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise BadRequest("'seed' must be a nonnegative integer")
    return data


def _outage_reason(exc: BaseException) -> str:
    cause: BaseException | None = exc
    while cause is not None:
        if isinstance(cause, BackendUnavailableError):
            return f"{cause.backend}: {cause.reason}"
        if isinstance(cause, ProtocolError):
            return f"protocol: {cause}"
        cause = cause.__cause__
    return str(exc)


def create_app(config: ServiceConfig, deps: CascadeDeps | None = None) -> FastAPI:
    deps = deps if deps is not None else build_deps(config)
    audit = AuditWriter(config.audit_path)
    fingerprint = config.fingerprint()
    tau = config.tau
    app = FastAPI(title="safeproj gateway", version="0.1.0")
    app.state.config = config
    app.state.audit = audit

    async def run(fn: Any, *args: Any, **kwargs: Any) -> Any:
        return await asyncio.wait_for(run_in_threadpool(fn, *args, **kwargs), timeout=config.request_timeout)

    @app.get("/v1/health")
    async def health() -> dict[str, Any]:
        return {"status": "ok", "config_fingerprint": fingerprint, "tau": tau}

    @app.post("/v1/project")
    async def project(request: Request) -> JSONResponse:
        request_id = uuid.uuid4().hex
        try:
            data = await _body(request)
            prompt = data["prompt"]
            projected, trace = await run(
                local_search_project,
                prompt,
                deps.proposer,
                deps.prompt_scorer,
                deps.embedder,
                config.cascade.projection,
            )
        except BadRequest as exc:
            return _error(400, "invalid_request", str(exc))
        except ProjectionUnavailableError as exc:
            return _error(503, "backend_unavailable", _outage_reason(exc), request_id=request_id)
        except asyncio.TimeoutError:
            return _error(503, "timeout", f"no result within {config.request_timeout}s", request_id=request_id)

        rec = project_record(
            request_id, prompt, projected, trace, tau=tau, redact=config.redact, fingerprint=fingerprint
        )
        await run_in_threadpool(audit.append, rec)
        body = {
            "request_id": request_id,
            "prompt": projected,
            "unchanged": projected == prompt,
            "score": trace.final.score.to_json(),
            "tau": tau,
            "trace": trace.to_json(),
        }
        if not rec["accepted"]:
            return _error(422, "infeasible", "no tau-safe prompt found within the search budget", **body)
        return JSONResponse(body)

    @app.post("/v1/generate")
    async def generate(request: Request) -> JSONResponse:
        request_id = uuid.uuid4().hex
        try:
            data = await _body(request)
            prompt = data["prompt"]
            outcome = await run(projected_reference_sample, prompt, deps, config.cascade, seed=data.get("seed", 0))
        except BadRequest as exc:
            return _error(400, "invalid_request", str(exc))
        except CascadeError as exc:
            return _error(503, "backend_unavailable", _outage_reason(exc), request_id=request_id)
        except asyncio.TimeoutError:
            return _error(503, "timeout", f"no result within {config.request_timeout}s", request_id=request_id)

        # the gate lives in the cascade; this re-check guards the response path
        if outcome.accepted and not outcome.verification.passes(tau):
            logger.error("cascade reported acceptance without a passing verification score")
            return _error(500, "internal", "inconsistent verification result")

        rec = generate_record(request_id, prompt, outcome, tau=tau, redact=config.redact, fingerprint=fingerprint)
        await run_in_threadpool(audit.append, rec)
        return JSONResponse(
            {
                "request_id": request_id,
                "accepted": outcome.accepted,
                "prompt": outcome.prompt,
                "unchanged": outcome.prompt == prompt,
                "image": outcome.image.to_json(),
                "verification": outcome.verification.to_json(),
                "attempts": outcome.attempts_used,
                "tau": tau,
            }
        )

    return app


def serve(config: ServiceConfig) -> None:  # pragma: no cover - blocking
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port)
