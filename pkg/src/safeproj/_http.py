"""Minimal JSON-over-HTTP client used by every remote backend."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any

import httpx

from .errors import BackendUnavailableError, ProtocolError

logger = logging.getLogger(__name__)


@dataclass
class EndpointConfig:
    """Where and how to reach one remote backend.

    ``api_key_env`` names an environment variable; it is read at request time
    so secrets never have to live in the config file.
    """

    url: str
    model: str = ""
    api_key: str | None = None
    api_key_env: str | None = None
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.25
    extra: dict[str, Any] = field(default_factory=dict)

    def headers(self) -> dict[str, str]:
        key = self.api_key
        if key is None and self.api_key_env:
            key = os.environ.get(self.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}


class JsonClient:
    """POST JSON, retry transport failures and 5xx, decode the JSON reply.

    A shared ``httpx.Client`` is safe for concurrent use from threads.
    """

    def __init__(
        self,
        endpoint: EndpointConfig,
        name: str,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.name = name
        self._client = httpx.Client(timeout=endpoint.timeout, transport=transport)

    def post(self, payload: dict[str, Any]) -> Any:
        resp = self.post_raw(payload)
        try:
            return resp.json()
        except ValueError as exc:
            raise ProtocolError(f"{self.name} returned non-JSON body") from exc

    def post_raw(self, payload: dict[str, Any]) -> httpx.Response:
        """POST and return the raw response (binary bodies are allowed)."""
        last = "no attempt made"
        for attempt in range(self.endpoint.retries + 1):
            if attempt:
                time.sleep(self.endpoint.backoff * attempt)
            try:
                resp = self._client.post(
                    self.endpoint.url, json=payload, headers=self.endpoint.headers()
                )
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                logger.warning("%s request failed (attempt %d): %s", self.name, attempt + 1, last)
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = f"HTTP {resp.status_code}"
                logger.warning("%s returned %s (attempt %d)", self.name, last, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise ProtocolError(
                    f"{self.name} rejected request: HTTP {resp.status_code}: {resp.text[:200]}"
                )
            return resp
        raise BackendUnavailableError(self.name, last)

    def close(self) -> None:
        self._client.close()
