"""Append-only JSONL audit log, one schema-versioned record per completed call."""

from __future__ import annotations

import hashlib
import json
import os
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from ..cascade import CascadeOutcome
from ..projection import ProjectionTrace
from ..scoring import UnsafetyScore

SCHEMA_VERSION = 1


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _score(s: UnsafetyScore) -> dict[str, Any]:
    # value + raw top-K so the value can be replayed through ab_score
    return s.to_json()


def _keep_original(redact: str, original_safe: bool) -> bool:
    if redact == "none":
        return True
    if redact == "all":
        return False
    return original_safe


def _base(kind: str, request_id: str, original: str, trace: ProjectionTrace, tau: float, redact: str, fp: str) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "ts": datetime.now(timezone.utc).isoformat(),
        "request_id": request_id,
        "kind": kind,
        "original_sha256": sha256_text(original),
        "original_stage1": _score(trace.initial.score),
        "tau": tau,
        "config_fingerprint": fp,
    }
    if _keep_original(redact, trace.initial.score.passes(tau)):
        rec["original_prompt"] = original
    return rec


def project_record(
    request_id: str,
    original: str,
    projected: str,
    trace: ProjectionTrace,
    *,
    tau: float,
    redact: str,
    fingerprint: str,
) -> dict[str, Any]:
    rec = _base("project", request_id, original, trace, tau, redact, fingerprint)
    final = trace.final
    rec.update(
        final_prompt=projected,
        stage1=_score(final.score),
        accepted=final.score.passes(tau),
        stop_reason=trace.stop_reason,
        steps=len(trace.steps),
    )
    return rec


def generate_record(
    request_id: str,
    original: str,
    outcome: CascadeOutcome,
    *,
    tau: float,
    redact: str,
    fingerprint: str,
) -> dict[str, Any]:
    rec = _base("generate", request_id, original, outcome.attempts[0].projection, tau, redact, fingerprint)
    attempts = []
    for a in outcome.attempts:
        attempts.append(
            {
                "attempt": a.attempt,
                "prompt": a.prompt,
                "stop_reason": a.projection.stop_reason,
                "stage1": _score(a.projection.final.score),
                "image": None if a.image is None else a.image.key,
                "stage2": None if a.verification is None else _score(a.verification),
                "accepted": a.accepted,
            }
        )
    rec.update(
        final_prompt=outcome.prompt,
        accepted=outcome.accepted,
        attempts_used=outcome.attempts_used,
        attempts=attempts,
    )
    return rec


class AuditWriter:
    """Serializes appends from concurrent requests; flushes and fsyncs per line."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = None if path is None else Path(path)
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            # fail at startup, not on the first request
            with open(self.path, "a", encoding="utf-8"):
                pass

    def append(self, record: dict[str, Any]) -> None:
        if self.path is None:
            return
        line = json.dumps(record, ensure_ascii=False, sort_keys=True, allow_nan=False)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())


def read_audit(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
